//! Symmetric per-tensor quantization, range calibration and fixed-point
//! rescaling.
//!
//! One rounding rule is used everywhere: nearest, ties away from zero. The
//! float simulation on the tape and the integer kernels in [`int_ops`] both
//! go through the functions in this module, which is what makes the two
//! paths agree bit for bit.

pub mod int_ops;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::{bn_fold_scale, fold_bias, scale_rows, BatchNorm};
use crate::tensor::Tensor;

pub const BITWIDTHS: [u32; 3] = [4, 6, 8];

/// Bounds for values stored as 32-bit accumulators (biases and position
/// offsets at accumulator scale).
pub const ACC_MIN: i64 = i32::MIN as i64;
pub const ACC_MAX: i64 = i32::MAX as i64;

/// Signed two's-complement range of a `b`-bit integer.
pub fn quant_range(bitwidth: u32) -> Result<(i64, i64)> {
    if !BITWIDTHS.contains(&bitwidth) {
        return Err(Error::Bitwidth(bitwidth));
    }
    let half = 1i64 << (bitwidth - 1);
    Ok((-half, half - 1))
}

/// Nearest integer, ties away from zero.
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

pub(crate) fn clamp_wide(r: f64, lo: i64, hi: i64) -> i64 {
    if r <= lo as f64 {
        lo
    } else if r >= hi as f64 {
        hi
    } else {
        r as i64
    }
}

/// Integer accumulator represented by the float `value` at `acc_scale`.
pub fn recover_accumulator(value: f64, acc_scale: f64) -> Result<i64> {
    let r = round_half_away(value / acc_scale);
    if !r.is_finite() || r < ACC_MIN as f64 || r > ACC_MAX as f64 {
        return Err(Error::AccumulatorOverflow(if r.is_finite() { r as i64 } else { i64::MAX }));
    }
    Ok(r as i64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bitwidth: u32,
    pub scale: f64,
    pub zero_point: i64,
    pub qmin: i64,
    pub qmax: i64,
}

impl QuantParams {
    pub fn new(bitwidth: u32, scale: f64) -> Result<Self> {
        let (qmin, qmax) = quant_range(bitwidth)?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("quantization scale must be positive, got {scale}")));
        }
        Ok(Self { bitwidth, scale, zero_point: 0, qmin, qmax })
    }

    /// Scale that maps `max_abs` onto `qmax`; a zero range falls back to
    /// `fallback`.
    pub fn symmetric(bitwidth: u32, max_abs: f64, fallback: f64) -> Result<Self> {
        let (_, qmax) = quant_range(bitwidth)?;
        let scale = if max_abs > 0.0 { max_abs / qmax as f64 } else { fallback };
        Self::new(bitwidth, scale)
    }

    /// Per-tensor weight parameters: `max|w| / qmax`, or 1 for an all-zero
    /// tensor.
    pub fn for_weights(bitwidth: u32, w: &Tensor) -> Result<Self> {
        Self::symmetric(bitwidth, w.max_abs(), 1.0)
    }

    pub fn quantize(&self, x: f64) -> i64 {
        clamp_wide(round_half_away(x / self.scale), self.qmin, self.qmax)
    }

    pub fn dequantize(&self, q: i64) -> f64 {
        q as f64 * self.scale
    }

    pub fn fake_quantize(&self, x: f64) -> f64 {
        self.dequantize(self.quantize(x))
    }
}

pub fn quantize(x: f64, qp: &QuantParams) -> i64 {
    qp.quantize(x)
}

pub fn dequantize(q: i64, qp: &QuantParams) -> f64 {
    qp.dequantize(q)
}

/// Elementwise quantize-dequantize without gradient tracking; see
/// [`crate::tensor::Tape::quantize`] for the differentiable form.
pub fn fake_quantize(x: &Tensor, qp: &QuantParams) -> Tensor {
    x.map(|v| qp.fake_quantize(v))
}

/// Quantizes every element at an arbitrary scale into `[lo, hi]`.
pub fn quantize_tensor(x: &Tensor, scale: f64, lo: i64, hi: i64) -> Vec<i64> {
    x.data().iter().map(|&v| clamp_wide(round_half_away(v / scale), lo, hi)).collect()
}

/// Exponential moving average of observed activation ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeObserver {
    pub momentum: f64,
    pub min: f64,
    pub max: f64,
    pub count: u64,
}

impl RangeObserver {
    pub fn new(momentum: f64) -> Self {
        Self { momentum, min: 0.0, max: 0.0, count: 0 }
    }

    pub fn observe(&mut self, min: f64, max: f64) {
        if self.count == 0 {
            self.min = min;
            self.max = max;
        } else {
            let m = self.momentum;
            self.min = (1.0 - m) * self.min + m * min;
            self.max = (1.0 - m) * self.max + m * max;
        }
        self.count += 1;
    }

    pub fn observe_tensor(&mut self, x: &Tensor) {
        let (lo, hi) = x.min_max();
        self.observe(lo, hi);
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Symmetric parameters covering the tracked range.
    pub fn params(&self, bitwidth: u32) -> Result<QuantParams> {
        if self.count == 0 {
            return Err(Error::invalid("no range observations"));
        }
        let (_, qmax) = quant_range(bitwidth)?;
        QuantParams::symmetric(bitwidth, self.min.abs().max(self.max.abs()), 1.0 / qmax as f64)
    }
}

/// Runs `observations` of `(min, max)` through an EMA observer.
pub fn calibrate(observations: &[(f64, f64)], momentum: f64, bitwidth: u32) -> Result<QuantParams> {
    if observations.is_empty() {
        return Err(Error::invalid("calibration needs at least one observation"));
    }
    let mut obs = RangeObserver::new(momentum);
    for &(lo, hi) in observations {
        obs.observe(lo, hi);
    }
    obs.params(bitwidth)
}

/// Integer approximation `mantissa / 2^shift` of a positive rescale ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedPointMultiplier {
    pub mantissa: i32,
    pub shift: u32,
}

const MAX_SHIFT: u32 = 62;

impl FixedPointMultiplier {
    pub const ONE: Self = Self { mantissa: 1, shift: 0 };

    /// Normalizes the mantissa into `[2^30, 2^31)` whenever the shift range
    /// allows it.
    pub fn from_ratio(ratio: f64) -> Result<Self> {
        if !(ratio > 0.0 && ratio.is_finite()) {
            return Err(Error::invalid(format!("rescale ratio must be positive, got {ratio}")));
        }
        if ratio >= (1u64 << 31) as f64 {
            return Err(Error::invalid(format!("rescale ratio {ratio} too large")));
        }
        let mut shift: i32 = 30 - ratio.log2().floor() as i32;
        let mut m = round_half_away(ratio * 2f64.powi(shift));
        if m >= (1u64 << 31) as f64 {
            shift -= 1;
            m = round_half_away(ratio * 2f64.powi(shift));
        }
        if shift < 0 {
            shift = 0;
            m = round_half_away(ratio);
        }
        if shift > MAX_SHIFT as i32 {
            shift = MAX_SHIFT as i32;
            m = round_half_away(ratio * 2f64.powi(shift));
        }
        Ok(Self { mantissa: m as i32, shift: shift as u32 })
    }

    pub fn ratio(&self) -> f64 {
        self.mantissa as f64 / 2f64.powi(self.shift as i32)
    }

    /// `round(acc * mantissa / 2^shift)` with ties away from zero, using
    /// only integer multiply, add and shift. `acc` must fit in 32 bits.
    pub fn apply(&self, acc: i64) -> i64 {
        let p = acc * self.mantissa as i64;
        if self.shift == 0 {
            return p;
        }
        let half = 1i64 << (self.shift - 1);
        if p >= 0 {
            (p + half) >> self.shift
        } else {
            -((-p + half) >> self.shift)
        }
    }
}

/// Checks that `acc` fits a 32-bit accumulator.
pub fn check_accumulator(acc: i64) -> Result<i64> {
    if (ACC_MIN..=ACC_MAX).contains(&acc) {
        Ok(acc)
    } else {
        Err(Error::AccumulatorOverflow(acc))
    }
}

/// Rescales a 32-bit accumulator and saturates to `[qmin, qmax]`.
pub fn requantize(acc: i64, fpm: FixedPointMultiplier, qmin: i64, qmax: i64) -> Result<i64> {
    check_accumulator(acc)?;
    Ok(fpm.apply(acc).clamp(qmin, qmax))
}

/// Folds eval-mode batch norm into the preceding layer:
/// `w' = w * gamma / sqrt(var + eps)`, `b' = (b - mean) * gamma / sqrt(var + eps) + beta`.
pub fn fold_batchnorm(w: &Tensor, b: Option<&Tensor>, bn: &BatchNorm) -> Result<(Tensor, Tensor)> {
    let scale = bn_fold_scale(&bn.gamma, &bn.running_var, bn.eps)?;
    let w2 = scale_rows(w, &scale)?;
    let b2 = fold_bias(b, &scale, &bn.beta, &bn.running_mean)?;
    Ok((w2, b2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(quant_range(4).unwrap(), (-8, 7));
        assert_eq!(quant_range(6).unwrap(), (-32, 31));
        assert_eq!(quant_range(8).unwrap(), (-128, 127));
        assert!(matches!(quant_range(5), Err(Error::Bitwidth(5))));
    }

    #[test]
    fn quantize_examples() {
        let qp = QuantParams::new(8, 0.5).unwrap();
        assert_eq!(qp.quantize(1.0), 2);
        let qp4 = QuantParams::new(4, 1.0).unwrap();
        assert_eq!(qp4.quantize(100.0), 7);
        assert_eq!(qp4.quantize(1.5), 2);
        assert_eq!(qp4.quantize(-1.5), -2);
        assert_eq!(qp4.quantize(-2.5), -3);
        assert_eq!(qp4.dequantize(3), 3.0);
    }

    #[test]
    fn calibrate_examples() {
        let qp = calibrate(&[(-1.0, 1.0); 5], 0.1, 8).unwrap();
        assert!((qp.scale - 1.0 / 127.0).abs() < 1e-15);
        let qp = calibrate(&[(-0.25, 3.0)], 0.1, 8).unwrap();
        assert!((qp.scale - 3.0 / 127.0).abs() < 1e-15);
        assert!(calibrate(&[], 0.1, 8).is_err());
    }

    #[test]
    fn calibrate_alternating_matches_recurrence() {
        let obs = [(-1.0, 2.0), (-3.0, 1.0), (-1.0, 2.0), (-3.0, 1.0)];
        // hand-unrolled EMA with momentum 0.5
        let mut lo = -1.0f64;
        let mut hi = 2.0f64;
        for &(l, h) in &obs[1..] {
            lo = 0.5 * lo + 0.5 * l;
            hi = 0.5 * hi + 0.5 * h;
        }
        let qp = calibrate(&obs, 0.5, 6).unwrap();
        assert_eq!(qp.scale, lo.abs().max(hi.abs()) / 31.0);
    }

    #[test]
    fn fixed_point_identity_and_zero() {
        let one = FixedPointMultiplier::from_ratio(1.0).unwrap();
        assert_eq!(one.ratio(), 1.0);
        for acc in [-200, -1, 0, 1, 5, 300] {
            assert_eq!(one.apply(acc), acc);
        }
        assert_eq!(requantize(0, one, -128, 127).unwrap(), 0);
        assert_eq!(requantize(300, one, -128, 127).unwrap(), 127);
    }

    #[test]
    fn fixed_point_precision() {
        for &r in &[1e-6, 3.7e-4, 0.01, 0.3333, 0.999, 1.5, 17.25] {
            let f = FixedPointMultiplier::from_ratio(r).unwrap();
            assert!(((f.ratio() - r) / r).abs() < 2f64.powi(-24), "{r}");
        }
    }

    #[test]
    fn accumulator_overflow_is_reported() {
        let f = FixedPointMultiplier::from_ratio(0.5).unwrap();
        assert!(matches!(requantize(1 << 40, f, -8, 7), Err(Error::AccumulatorOverflow(_))));
    }

    #[test]
    fn fold_identity_and_zero_gamma() {
        let w = Tensor::new(vec![2, 1, 3], vec![1.0, -2.0, 3.0, 0.5, 0.25, -1.0]).unwrap();
        let b = Tensor::from_vec(vec![0.3, -0.7]);
        let mut bn = BatchNorm::new(2);
        bn.eps = 0.0;
        let (w2, b2) = fold_batchnorm(&w, Some(&b), &bn).unwrap();
        assert_eq!(w2, w);
        assert_eq!(b2, b);

        bn.gamma = Tensor::zeros(&[2]);
        bn.beta = Tensor::from_vec(vec![4.0, 5.0]);
        let (w3, b3) = fold_batchnorm(&w, Some(&b), &bn).unwrap();
        assert!(w3.data().iter().all(|&v| v == 0.0));
        assert_eq!(b3.data(), &[4.0, 5.0]);
    }

    #[test]
    fn fold_rejects_nonpositive_variance() {
        let w = Tensor::filled(&[1, 1, 1], 1.0);
        let mut bn = BatchNorm::new(1);
        bn.eps = 0.0;
        bn.running_var = Tensor::zeros(&[1]);
        assert!(fold_batchnorm(&w, None, &bn).is_err());
    }
}
