use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use footstrike::hwcost::{CostModel, PlatformProfile};
use footstrike::models::Arch;
use footstrike::quant;
use footstrike::Error;
use serde::Serialize;

pub const USAGE: u8 = 2;
pub const RUNTIME: u8 = 3;

/// Exit status for a failed command: numeric trouble during a run is 3,
/// anything the caller can fix by changing inputs is 2.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Diverged(_) | Error::AccumulatorOverflow(_) | Error::EmptyTape | Error::NonScalarLoss(_) => {
                    RUNTIME
                }
                _ => USAGE,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return USAGE;
        }
    }
    RUNTIME
}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidArgument(msg.into()).into()
}

pub fn parse_arch(s: &str) -> std::result::Result<Arch, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

pub fn parse_bitwidth(s: &str) -> std::result::Result<u32, String> {
    let b: u32 = s.parse().map_err(|_| format!("`{s}` is not an integer"))?;
    quant::quant_range(b).map(|_| b).map_err(|e| e.to_string())
}

/// Size and bitwidth of the reference configuration of each architecture.
pub fn reference_config(arch: Arch) -> (usize, u32) {
    match arch {
        Arch::Cnn1d => (3, 4),
        Arch::SepCnn1d => (3, 6),
        Arch::Lstm => (24, 8),
        Arch::Transformer => (8, 4),
    }
}

pub fn cost_model(platform: &str) -> Result<CostModel> {
    let profile = PlatformProfile::resolve(platform).with_context(|| format!("platform `{platform}`"))?;
    Ok(CostModel::new(profile)?)
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<PathBuf> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path.to_path_buf())
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<PathBuf> {
    let mut f = fs::File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(path.to_path_buf())
}
