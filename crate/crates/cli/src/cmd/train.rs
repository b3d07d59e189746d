use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use footstrike::dataio::{cap_balance, load_sessions, participants};
use footstrike::models::{Arch, ModelConfig};
use footstrike::stream::StreamConfig;
use footstrike::train::{two_step, EpochLog, TrainConfig, WindowSet};
use serde::{Deserialize, Serialize};

use crate::common::{create_dir, parse_arch, parse_bitwidth, reference_config, usage, write_json, write_jsonl};
use crate::manifest::Run;

#[derive(clap::Args)]
pub struct Args {
    /// JSON run description; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_arch)]
    arch: Option<Arch>,
    /// Blocks, hidden size or model width, depending on the architecture.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, value_parser = parse_bitwidth)]
    bitwidth: Option<u32>,
    /// Session file or directory of session files.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Participant to fine-tune and test on; defaults to the first one.
    #[arg(long)]
    hold_out: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Epoch cap of generalized pre-training.
    #[arg(long)]
    epochs: Option<usize>,
    /// Epoch cap of QAT fine-tuning.
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Samples kept per participant and label.
    #[arg(long)]
    cap: Option<usize>,
    /// Truncate both labels of a participant to the same length.
    #[arg(long)]
    equalize: bool,
    #[arg(long)]
    w: Option<usize>,
    #[arg(long)]
    s: Option<f64>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

/// Everything a training run depends on.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainPlan {
    arch: Arch,
    size: Option<usize>,
    bitwidth: Option<u32>,
    data: Option<PathBuf>,
    hold_out: Option<String>,
    batch_size: usize,
    lr: f64,
    epochs: usize,
    finetune_epochs: usize,
    patience: usize,
    seed: u64,
    cap: usize,
    equalize: bool,
    stream: StreamConfig,
}

impl Default for TrainPlan {
    fn default() -> Self {
        let tc = TrainConfig::default();
        Self {
            arch: Arch::SepCnn1d,
            size: None,
            bitwidth: None,
            data: None,
            hold_out: None,
            batch_size: tc.batch_size,
            lr: tc.lr,
            epochs: tc.epochs,
            finetune_epochs: tc.epochs,
            patience: tc.patience,
            seed: tc.seed,
            cap: 3800,
            equalize: false,
            stream: StreamConfig::default(),
        }
    }
}

impl TrainPlan {
    fn resolve(a: &Args) -> Result<Self> {
        let mut plan = match &a.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("bad run description {}", p.display()))?
            }
            None => TrainPlan::default(),
        };
        if let Some(v) = a.arch {
            if v != plan.arch {
                // sizes and bitwidths of another architecture do not carry over
                plan.size = None;
                plan.bitwidth = None;
            }
            plan.arch = v;
        }
        macro_rules! take {
            ($($field:ident),*) => { $(if let Some(v) = a.$field.clone() { plan.$field = v.into(); })* };
        }
        take!(size, bitwidth, data, hold_out, batch_size, lr, epochs, finetune_epochs, patience, seed, cap);
        plan.equalize |= a.equalize;
        if let Some(w) = a.w {
            plan.stream.w = w;
        }
        if let Some(s) = a.s {
            plan.stream.s = s;
        }
        if let Some(d) = a.d {
            plan.stream.d = d;
        }
        let (size, b) = reference_config(plan.arch);
        plan.size.get_or_insert(size);
        plan.bitwidth.get_or_insert(b);
        Ok(plan)
    }

    fn train_config(&self, epochs: usize) -> TrainConfig {
        TrainConfig { batch_size: self.batch_size, lr: self.lr, epochs, patience: self.patience, seed: self.seed }
    }
}

#[derive(Serialize)]
struct Report<'a> {
    model: String,
    hold_out: &'a str,
    test_windows: usize,
    test_f1_float: f64,
    test_f1_fake: f64,
    test_f1_int: f64,
    int_fake_agreement: usize,
    generalized_best_epoch: Option<usize>,
    finetune_best_epoch: Option<usize>,
}

pub fn run(a: Args) -> Result<()> {
    let plan = TrainPlan::resolve(&a)?;
    plan.stream.validate()?;
    let data = plan.data.as_ref().ok_or_else(|| usage("no dataset given (use --data or `data` in --config)"))?;
    let cfg = ModelConfig::with_size(plan.arch, plan.size.unwrap_or_default(), plan.bitwidth.unwrap_or_default())
        .with_n(plan.stream.n());
    cfg.validate()?;
    let general = plan.train_config(plan.epochs);
    let finetune = plan.train_config(plan.finetune_epochs);
    general.validate()?;

    let run = Run::start("train", Some(plan.seed), &plan)?;
    let segments = load_sessions(data).with_context(|| format!("cannot load sessions from {}", data.display()))?;
    let segments = cap_balance(&segments, plan.cap, plan.equalize);
    let subject = match &plan.hold_out {
        Some(p) => p.clone(),
        None => participants(&segments).into_iter().next().ok_or_else(|| usage("dataset has no segments"))?,
    };
    let set = WindowSet::from_segments(&segments, &plan.stream)?;
    let out = two_step(&cfg, &set, &subject, &general, &finetune)?;

    create_dir(&a.out)?;
    let model_path = a.out.join("model.json");
    out.model.save(&model_path)?;
    let int_path = a.out.join("model.int.json");
    out.int_model.save(&int_path)?;
    let log: Vec<&EpochLog> = out.generalized.log.iter().chain(&out.finetune.log).collect();
    let log_path = write_jsonl(&a.out.join("train_log.jsonl"), &log)?;
    let report = Report {
        model: cfg.label(),
        hold_out: &subject,
        test_windows: out.split.test.len(),
        test_f1_float: out.test_f1_float,
        test_f1_fake: out.test_f1_fake,
        test_f1_int: out.test_f1_int,
        int_fake_agreement: out.agreement,
        generalized_best_epoch: out.generalized.best_epoch,
        finetune_best_epoch: out.finetune.best_epoch,
    };
    let report_path = write_json(&a.out.join("report.json"), &report)?;
    run.finish(&a.out, &[model_path, int_path, log_path, report_path])?;
    println!(
        "{} on {subject}: test F1 float {:.4}, fake-quant {:.4}, integer {:.4} ({}/{} agree)",
        report.model,
        out.test_f1_float,
        out.test_f1_fake,
        out.test_f1_int,
        out.agreement,
        out.split.test.len()
    );
    Ok(())
}
