use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::quant_range;

/// Temporal kernel size of every convolution.
pub const KERNEL: usize = 3;
pub const MAX_BLOCKS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    #[serde(alias = "cnn")]
    Cnn1d,
    #[serde(alias = "sepcnn")]
    SepCnn1d,
    Lstm,
    Transformer,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Cnn1d, Arch::SepCnn1d, Arch::Lstm, Arch::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Cnn1d => "cnn1d",
            Arch::SepCnn1d => "sepcnn1d",
            Arch::Lstm => "lstm",
            Arch::Transformer => "transformer",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_convolutional(self) -> bool {
        matches!(self, Arch::Cnn1d | Arch::SepCnn1d)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "cnn" | "cnn1d" | "1dcnn" => Ok(Arch::Cnn1d),
            "sepcnn" | "sepcnn1d" | "1dsepcnn" => Ok(Arch::SepCnn1d),
            "lstm" => Ok(Arch::Lstm),
            "transformer" => Ok(Arch::Transformer),
            _ => Err(Error::Config(format!("unknown architecture '{s}'"))),
        }
    }
}

/// One classifier configuration. Only the size field of the chosen
/// architecture is set: `num_blocks` for the convolutional variants,
/// `h_size` for the LSTM, `d_model` for the Transformer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Input length in samples.
    pub n: usize,
    pub c_in: usize,
    pub classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_blocks: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_model: Option<usize>,
    pub bitwidth: u32,
}

pub const DEFAULT_N: usize = 25;
pub const DEFAULT_C_IN: usize = 3;
pub const DEFAULT_CLASSES: usize = 2;

impl ModelConfig {
    fn base(arch: Arch, bitwidth: u32) -> Self {
        Self {
            arch,
            n: DEFAULT_N,
            c_in: DEFAULT_C_IN,
            classes: DEFAULT_CLASSES,
            num_blocks: None,
            h_size: None,
            d_model: None,
            bitwidth,
        }
    }

    pub fn cnn(num_blocks: usize, bitwidth: u32) -> Self {
        Self { num_blocks: Some(num_blocks), ..Self::base(Arch::Cnn1d, bitwidth) }
    }

    pub fn sepcnn(num_blocks: usize, bitwidth: u32) -> Self {
        Self { num_blocks: Some(num_blocks), ..Self::base(Arch::SepCnn1d, bitwidth) }
    }

    pub fn lstm(h_size: usize, bitwidth: u32) -> Self {
        Self { h_size: Some(h_size), ..Self::base(Arch::Lstm, bitwidth) }
    }

    pub fn transformer(d_model: usize, bitwidth: u32) -> Self {
        Self { d_model: Some(d_model), ..Self::base(Arch::Transformer, bitwidth) }
    }

    /// The architecture's size knob with the given value.
    pub fn with_size(arch: Arch, size: usize, bitwidth: u32) -> Self {
        match arch {
            Arch::Cnn1d => Self::cnn(size, bitwidth),
            Arch::SepCnn1d => Self::sepcnn(size, bitwidth),
            Arch::Lstm => Self::lstm(size, bitwidth),
            Arch::Transformer => Self::transformer(size, bitwidth),
        }
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    /// Value of the architecture's size knob.
    pub fn size(&self) -> usize {
        match self.arch {
            Arch::Cnn1d | Arch::SepCnn1d => self.num_blocks.unwrap_or(0),
            Arch::Lstm => self.h_size.unwrap_or(0),
            Arch::Transformer => self.d_model.unwrap_or(0),
        }
    }

    pub fn size_name(&self) -> &'static str {
        match self.arch {
            Arch::Cnn1d | Arch::SepCnn1d => "num_blocks",
            Arch::Lstm => "h_size",
            Arch::Transformer => "d_model",
        }
    }

    pub fn validate(&self) -> Result<()> {
        quant_range(self.bitwidth)?;
        if self.n == 0 || self.c_in == 0 {
            return Err(Error::Config("input length and channel count must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        let set = [self.num_blocks.is_some(), self.h_size.is_some(), self.d_model.is_some()];
        let want = match self.arch {
            Arch::Cnn1d | Arch::SepCnn1d => 0,
            Arch::Lstm => 1,
            Arch::Transformer => 2,
        };
        for (i, &is_set) in set.iter().enumerate() {
            if is_set != (i == want) {
                return Err(Error::Config(format!("{} takes exactly one size field: {}", self.arch, self.size_name())));
            }
        }
        let size = self.size();
        match self.arch {
            Arch::Cnn1d | Arch::SepCnn1d => {
                if !(1..=MAX_BLOCKS).contains(&size) {
                    return Err(Error::Config(format!("num_blocks must be in 1..={MAX_BLOCKS}, got {size}")));
                }
                let pools = size as u32 - 1;
                if self.n < 1 << pools {
                    return Err(Error::Config(format!(
                        "input length {} is too short for {} pooling stages",
                        self.n, pools
                    )));
                }
            }
            Arch::Lstm | Arch::Transformer => {
                if size == 0 {
                    return Err(Error::Config(format!("{} must be positive", self.size_name())));
                }
            }
        }
        Ok(())
    }

    /// Short human label, e.g. `sepcnn1d[num_blocks=3,b=6]`.
    pub fn label(&self) -> String {
        format!("{}[{}={},b={}]", self.arch, self.size_name(), self.size(), self.bitwidth)
    }
}

/// Output channels per block: 3 for blocks one and two, doubling every two
/// blocks after that.
pub fn channel_schedule(num_blocks: usize) -> Result<Vec<usize>> {
    if !(1..=MAX_BLOCKS).contains(&num_blocks) {
        return Err(Error::Config(format!("num_blocks must be in 1..={MAX_BLOCKS}, got {num_blocks}")));
    }
    Ok((0..num_blocks).map(|i| 3 << (i / 2)).collect())
}

/// Width of the first dense layer of the convolutional heads.
pub fn dense_hidden(final_channels: usize) -> usize {
    (final_channels / 2).max(2)
}

/// Sequence length entering each block (pooling sits between blocks).
pub fn block_lengths(n: usize, num_blocks: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(num_blocks);
    let mut l = n;
    for i in 0..num_blocks {
        if i > 0 {
            l /= 2;
        }
        out.push(l);
    }
    out
}

/// Exact trainable parameter total, computed in closed form.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    cfg.validate()?;
    let (c, k) = (cfg.classes, KERNEL);
    Ok(match cfg.arch {
        Arch::Cnn1d | Arch::SepCnn1d => {
            let sched = channel_schedule(cfg.size())?;
            let mut total = 0;
            let mut c_in = cfg.c_in;
            for &c_out in &sched {
                total += if cfg.arch == Arch::Cnn1d {
                    c_in * c_out * k + c_out
                } else {
                    (c_in * k + c_in) + (c_in * c_out + c_out)
                };
                total += 2 * c_out;
                c_in = c_out;
            }
            let h = dense_hidden(c_in);
            total + c_in * h + h + h * c + c
        }
        Arch::Lstm => {
            let h = cfg.size();
            4 * h * (cfg.c_in + h) + 4 * h + h * c + c
        }
        Arch::Transformer => {
            let d = cfg.size();
            let proj = cfg.c_in * d + d;
            let attn = 4 * (d * d + d);
            let ffn = (d * 4 * d + 4 * d) + (4 * d * d + d);
            proj + attn + ffn + 2 * (2 * d) + d * c + c
        }
    })
}

/// Multiply-accumulate total of one forward pass at input length `n`.
/// Pooling and activations cost nothing; batch norm of the convolutional
/// models is folded away, the Transformer's post-residual batch norm is a
/// per-element affine and counts one MAC per element.
pub fn mac_count(cfg: &ModelConfig) -> Result<usize> {
    cfg.validate()?;
    let (n, c, k) = (cfg.n, cfg.classes, KERNEL);
    Ok(match cfg.arch {
        Arch::Cnn1d | Arch::SepCnn1d => {
            let sched = channel_schedule(cfg.size())?;
            let lens = block_lengths(n, sched.len());
            let mut total = 0;
            let mut c_in = cfg.c_in;
            for (&c_out, &l) in sched.iter().zip(&lens) {
                total += if cfg.arch == Arch::Cnn1d { c_in * c_out * k * l } else { c_in * k * l + c_in * c_out * l };
                c_in = c_out;
            }
            let h = dense_hidden(c_in);
            total + c_in * h + h * c
        }
        Arch::Lstm => {
            let h = cfg.size();
            n * (4 * h * (cfg.c_in + h) + 3 * h) + h * c
        }
        Arch::Transformer => {
            let d = cfg.size();
            let proj = n * cfg.c_in * d;
            let qkvo = 4 * n * d * d;
            let attn = 2 * n * n * d;
            let bn = 2 * n * d;
            let ffn = 2 * n * d * 4 * d;
            proj + qkvo + attn + bn + ffn + d * c
        }
    })
}
