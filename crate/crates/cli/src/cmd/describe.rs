use anyhow::Result;
use footstrike::models::{describe, Arch, ModelConfig, DEFAULT_N};

use crate::common::{parse_arch, parse_bitwidth, reference_config};

#[derive(clap::Args)]
pub struct Args {
    #[arg(long, value_parser = parse_arch)]
    arch: Arch,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, value_parser = parse_bitwidth)]
    bitwidth: Option<u32>,
    /// Input length in samples.
    #[arg(long, default_value_t = DEFAULT_N)]
    n: usize,
    #[arg(long)]
    json: bool,
}

pub fn run(a: Args) -> Result<()> {
    let (size, b) = reference_config(a.arch);
    let cfg = ModelConfig::with_size(a.arch, a.size.unwrap_or(size), a.bitwidth.unwrap_or(b)).with_n(a.n);
    let layers = describe(&cfg)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&layers)?);
        return Ok(());
    }
    println!("{}", cfg.label());
    println!("{:<22} {:<18} {:>12} {:>8} {:>8}", "layer", "kind", "output", "params", "MACs");
    for l in &layers {
        let shape = format!("{:?}", l.output_shape);
        println!("{:<22} {:<18} {:>12} {:>8} {:>8}", l.name, l.kind, shape, l.params, l.macs);
    }
    let params: usize = layers.iter().map(|l| l.params).sum();
    let macs: usize = layers.iter().map(|l| l.macs).sum();
    println!("{:<22} {:<18} {:>12} {:>8} {:>8}", "total", "", "", params, macs);
    Ok(())
}
