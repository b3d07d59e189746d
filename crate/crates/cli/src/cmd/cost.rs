use std::path::PathBuf;

use anyhow::{Context, Result};
use footstrike::hwcost::{CostReport, Verdict};
use footstrike::models::{Arch, IntModel, Model, ModelConfig};
use serde::Serialize;

use crate::common::{cost_model, create_dir, parse_arch, parse_bitwidth, reference_config, usage, write_json};
use crate::manifest::Run;

#[derive(clap::Args, Serialize)]
pub struct Args {
    /// Checkpoint or integer model whose configuration is costed.
    #[arg(long, conflicts_with_all = ["arch", "size", "bitwidth"])]
    model: Option<PathBuf>,
    #[arg(long, value_parser = parse_arch)]
    arch: Option<Arch>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, value_parser = parse_bitwidth)]
    bitwidth: Option<u32>,
    /// Built-in platform name or a profile JSON file.
    #[arg(long, default_value = "xc7s15")]
    platform: String,
    /// Also write cost.json and a manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Output<'a> {
    #[serde(flatten)]
    report: &'a CostReport,
    verdict: Verdict,
}

fn model_config(a: &Args) -> Result<ModelConfig> {
    if let Some(path) = &a.model {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("{} is not JSON", path.display()))?;
        return Ok(if value.get("requants").is_some() {
            IntModel::from_json(&text)?.config
        } else {
            Model::from_json(&text)?.config
        });
    }
    let arch = a.arch.ok_or_else(|| usage("give --model or --arch"))?;
    let (size, b) = reference_config(arch);
    Ok(ModelConfig::with_size(arch, a.size.unwrap_or(size), a.bitwidth.unwrap_or(b)))
}

pub fn run(a: Args) -> Result<()> {
    let cfg = model_config(&a)?;
    let run = Run::start("cost", None, &a)?;
    let report = cost_model(&a.platform)?.cost(&cfg)?;
    let out = Output { report: &report, verdict: report.verdict() };
    println!("{}", serde_json::to_string_pretty(&out)?);
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let path = write_json(&dir.join("cost.json"), &out)?;
        run.finish(dir, &[path])?;
    }
    Ok(())
}
