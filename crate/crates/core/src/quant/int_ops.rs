//! Integer-only kernels. Inputs are single samples laid out channels-first;
//! every kernel returns raw accumulators, which callers pass through
//! [`requantize_all`] to get back to the activation bitwidth.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{check_accumulator, FixedPointMultiplier};

/// Attention probabilities are unsigned Q0.16: `PROB_ONE` represents 1.0.
pub const PROB_BITS: u32 = 16;
pub const PROB_ONE: i64 = 1 << PROB_BITS;
pub const PROB_SCALE: f64 = 1.0 / PROB_ONE as f64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i64>,
}

impl IntTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch { op: "int_tensor", dim: "element count", expected: n, got: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0; shape.iter().product()] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape {
            [a, b] => Ok((a, b)),
            _ => Err(Error::InvalidShape { op, shape: self.shape.clone(), reason: "expected rank 2" }),
        }
    }
}

fn expect(op: &'static str, dim: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { op, dim, expected, got })
    }
}

/// Same-padded convolution accumulators. `w` is `[O, C, K]`; `bias` holds
/// one accumulator-scale offset per output channel; `pos_bias`, if given,
/// adds a `[O, L]` offset.
pub fn conv1d_acc(x: &IntTensor, w: &IntTensor, bias: &[i64], pos_bias: Option<&IntTensor>) -> Result<IntTensor> {
    let (c_in, l) = x.dims2("int_conv1d")?;
    let [c_out, wc, k] = *w.shape else {
        return Err(Error::InvalidShape {
            op: "int_conv1d",
            shape: w.shape.clone(),
            reason: "weight must be [C_out, C_in, K]",
        });
    };
    expect("int_conv1d", "input channels", wc, c_in)?;
    expect("int_conv1d", "bias length", c_out, bias.len())?;
    if let Some(p) = pos_bias {
        expect("int_conv1d", "position bias length", c_out * l, p.len())?;
    }
    let half = (k / 2) as isize;
    let mut out = vec![0i64; c_out * l];
    for o in 0..c_out {
        for t in 0..l {
            let mut acc = bias[o];
            if let Some(p) = pos_bias {
                acc += p.data[o * l + t];
            }
            for c in 0..c_in {
                for j in 0..k {
                    let src = t as isize + j as isize - half;
                    if src >= 0 && (src as usize) < l {
                        acc += w.data[(o * c_in + c) * k + j] * x.data[c * l + src as usize];
                    }
                }
            }
            out[o * l + t] = acc;
        }
    }
    IntTensor::new(vec![c_out, l], out)
}

pub fn depthwise_acc(x: &IntTensor, w: &IntTensor, bias: &[i64]) -> Result<IntTensor> {
    let (c, l) = x.dims2("int_depthwise")?;
    let (wc, k) = w.dims2("int_depthwise")?;
    expect("int_depthwise", "channels", wc, c)?;
    expect("int_depthwise", "bias length", c, bias.len())?;
    let half = (k / 2) as isize;
    let mut out = vec![0i64; c * l];
    for ch in 0..c {
        for t in 0..l {
            let mut acc = bias[ch];
            for j in 0..k {
                let src = t as isize + j as isize - half;
                if src >= 0 && (src as usize) < l {
                    acc += w.data[ch * k + j] * x.data[ch * l + src as usize];
                }
            }
            out[ch * l + t] = acc;
        }
    }
    IntTensor::new(vec![c, l], out)
}

/// `W x + b` for `W` of shape `[M, N]`.
pub fn dense_acc(x: &[i64], w: &IntTensor, bias: Option<&[i64]>) -> Result<Vec<i64>> {
    let (m, n) = w.dims2("int_dense")?;
    expect("int_dense", "input features", n, x.len())?;
    if let Some(b) = bias {
        expect("int_dense", "bias length", m, b.len())?;
    }
    Ok((0..m)
        .map(|o| {
            let dot: i64 = w.data[o * n..(o + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum();
            dot + bias.map_or(0, |b| b[o])
        })
        .collect())
}

/// Kernel 2, stride 2; the trailing odd sample is dropped.
pub fn maxpool(x: &IntTensor) -> Result<IntTensor> {
    let (c, l) = x.dims2("int_maxpool")?;
    if l < 2 {
        return Err(Error::InvalidShape {
            op: "int_maxpool",
            shape: x.shape.clone(),
            reason: "sequence length must be at least 2",
        });
    }
    let lo = l / 2;
    let mut out = Vec::with_capacity(c * lo);
    for ch in 0..c {
        for t in 0..lo {
            out.push(x.data[ch * l + 2 * t].max(x.data[ch * l + 2 * t + 1]));
        }
    }
    IntTensor::new(vec![c, lo], out)
}

/// Per-channel sums over time; the mean is realized by the caller's
/// requantization scale.
pub fn gap_acc(x: &IntTensor) -> Result<Vec<i64>> {
    let (_, l) = x.dims2("int_gap")?;
    Ok(x.data.chunks(l).map(|r| r.iter().sum()).collect())
}

/// `x[c][t] * a[c] + shift[c]`.
pub fn channel_affine_acc(x: &IntTensor, a: &[i64], shift: &[i64]) -> Result<IntTensor> {
    let (c, l) = x.dims2("int_channel_affine")?;
    expect("int_channel_affine", "scale length", c, a.len())?;
    expect("int_channel_affine", "shift length", c, shift.len())?;
    let data = x.data.iter().enumerate().map(|(i, &v)| v * a[i / l] + shift[i / l]).collect();
    IntTensor::new(x.shape.clone(), data)
}

/// `S[i][j] = Σ_c q[c][i] k[c][j]` for channels-first `[d, n]` inputs.
pub fn scores_acc(q: &IntTensor, k: &IntTensor) -> Result<IntTensor> {
    let (d, n) = q.dims2("int_scores")?;
    if q.shape != k.shape {
        return Err(Error::InvalidShape {
            op: "int_scores",
            shape: k.shape.clone(),
            reason: "query and key shapes differ",
        });
    }
    let mut out = vec![0i64; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..d).map(|c| q.data[c * n + i] * k.data[c * n + j]).sum();
        }
    }
    IntTensor::new(vec![n, n], out)
}

/// `A[c][i] = Σ_j P[i][j] v[c][j]`.
pub fn mix_acc(p: &IntTensor, v: &IntTensor) -> Result<IntTensor> {
    let (d, n) = v.dims2("int_mix")?;
    if p.shape != [n, n] {
        return Err(Error::InvalidShape {
            op: "int_mix",
            shape: p.shape.clone(),
            reason: "probabilities must be [n, n]",
        });
    }
    let mut out = vec![0i64; d * n];
    for c in 0..d {
        for i in 0..n {
            out[c * n + i] = (0..n).map(|j| p.data[i * n + j] * v.data[c * n + j]).sum();
        }
    }
    IntTensor::new(vec![d, n], out)
}

/// `LUT[k] = round(2^(-k/256) * 2^16)`.
pub fn exp2_lut() -> &'static [i64; 256] {
    static LUT: OnceLock<[i64; 256]> = OnceLock::new();
    LUT.get_or_init(|| {
        let mut t = [0i64; 256];
        for (k, v) in t.iter_mut().enumerate() {
            *v = (2f64.powf(-(k as f64) / 256.0) * PROB_ONE as f64).round() as i64;
        }
        t
    })
}

/// Rescale ratio taking a score difference at `score_scale` to a base-2
/// exponent in Q8.8.
pub fn softmax_exponent_ratio(score_scale: f64) -> f64 {
    score_scale * std::f64::consts::LOG2_E * 256.0
}

/// Integer softmax of one row of quantized scores. `to_exp2` maps score
/// differences to Q8.8 base-2 exponents (see [`softmax_exponent_ratio`]).
/// Returns Q0.16 probabilities.
pub fn softmax_row(scores: &[i64], to_exp2: FixedPointMultiplier) -> Vec<i64> {
    let lut = exp2_lut();
    let m = scores.iter().copied().max().unwrap_or(0);
    let e: Vec<i64> = scores
        .iter()
        .map(|&s| {
            let t = -to_exp2.apply(s - m);
            let int_part = t >> 8;
            if int_part > PROB_BITS as i64 {
                0
            } else {
                lut[(t & 255) as usize] >> int_part
            }
        })
        .collect();
    let sum: i64 = e.iter().sum();
    e.iter().map(|&v| (v * PROB_ONE + sum / 2) / sum).collect()
}

pub fn softmax_rows(scores: &IntTensor, to_exp2: FixedPointMultiplier) -> Result<IntTensor> {
    let (_, n) = scores.dims2("int_softmax")?;
    let data = scores.data.chunks(n).flat_map(|r| softmax_row(r, to_exp2)).collect();
    IntTensor::new(scores.shape.clone(), data)
}

/// Requantizes every accumulator, checking the 32-bit bound first.
pub fn requantize_all(acc: &[i64], fpm: FixedPointMultiplier, lo: i64, hi: i64) -> Result<Vec<i64>> {
    acc.iter().map(|&a| Ok(fpm.apply(check_accumulator(a)?).clamp(lo, hi))).collect()
}

/// Rescales without saturating; used where two rescaled terms are summed
/// before the final clamp.
pub fn rescale_all(acc: &[i64], fpm: FixedPointMultiplier) -> Result<Vec<i64>> {
    acc.iter().map(|&a| Ok(fpm.apply(check_accumulator(a)?))).collect()
}
