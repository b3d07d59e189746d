//! Float kernels for every layer the four classifiers use, with their
//! hand-written vector-Jacobian products. The tape in [`super::tape`] only
//! dispatches to these functions.

use crate::error::{Error, Result};

use super::Tensor;

/// Slope of the hard sigmoid, `clamp(slope * x + 0.5, 0, 1)`. A power of two
/// so the integer path can realize it with a shift.
pub const HARDSIGMOID_SLOPE: f64 = 0.25;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// `(batch, channels, length, batched)` of a `[C, L]` or `[B, C, L]` input.
pub(crate) fn seq_dims(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize, bool)> {
    match *x.shape() {
        [c, l] => Ok((1, c, l, false)),
        [b, c, l] => Ok((b, c, l, true)),
        _ => Err(Error::InvalidShape { op, shape: x.shape().to_vec(), reason: "expected [C, L] or [B, C, L]" }),
    }
}

/// `(batch, features, batched)` of an `[N]` or `[B, N]` input.
pub(crate) fn vec_dims(x: &Tensor, op: &'static str) -> Result<(usize, usize, bool)> {
    match *x.shape() {
        [n] => Ok((1, n, false)),
        [b, n] => Ok((b, n, true)),
        _ => Err(Error::InvalidShape { op, shape: x.shape().to_vec(), reason: "expected [N] or [B, N]" }),
    }
}

/// Channel view `(outer, channels, inner)`: rank 3 is `[B, C, L]`, rank 2 is
/// `[C, L]`, rank 1 is `[C]`.
pub(crate) fn channel_view(x: &Tensor) -> (usize, usize, usize) {
    match *x.shape() {
        [c] => (1, c, 1),
        [c, l] => (1, c, l),
        [b, c, l] => (b, c, l),
        _ => unreachable!("tensor rank is 1..=3"),
    }
}

fn seq_shape(b: usize, c: usize, l: usize, batched: bool) -> Vec<usize> {
    if batched {
        vec![b, c, l]
    } else {
        vec![c, l]
    }
}

fn vec_shape(b: usize, n: usize, batched: bool) -> Vec<usize> {
    if batched {
        vec![b, n]
    } else {
        vec![n]
    }
}

fn expect(op: &'static str, dim: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { op, dim, expected, got })
    }
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, n: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.rank() != 1 {
            return Err(Error::InvalidShape { op, shape: b.shape().to_vec(), reason: "bias must be rank 1" });
        }
        expect(op, "bias length", n, b.len())?;
    }
    Ok(())
}

// ---------------------------------------------------------------- conv1d

/// Same-padded, stride-1 convolution. `weight` is `[C_out, C_in, K]` with odd
/// `K`; output length equals input length.
pub fn conv1d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (b, c_in, l, batched) = seq_dims(x, "conv1d")?;
    let [c_out, w_in, k] = *weight.shape() else {
        return Err(Error::InvalidShape {
            op: "conv1d",
            shape: weight.shape().to_vec(),
            reason: "weight must be [C_out, C_in, K]",
        });
    };
    expect("conv1d", "input channels", w_in, c_in)?;
    if k % 2 == 0 {
        return Err(Error::InvalidShape {
            op: "conv1d",
            shape: weight.shape().to_vec(),
            reason: "kernel size must be odd",
        });
    }
    check_bias("conv1d", bias, c_out)?;
    let half = (k / 2) as isize;
    let (xd, wd) = (x.data(), weight.data());
    let mut out = vec![0.0; b * c_out * l];
    for n in 0..b {
        for o in 0..c_out {
            let base = bias.map_or(0.0, |t| t.data()[o]);
            let row = &mut out[(n * c_out + o) * l..(n * c_out + o + 1) * l];
            row.iter_mut().for_each(|v| *v = base);
            for c in 0..c_in {
                let xs = &xd[(n * c_in + c) * l..(n * c_in + c + 1) * l];
                for j in 0..k {
                    let w = wd[(o * c_in + c) * k + j];
                    let shift = j as isize - half;
                    for (t, acc) in row.iter_mut().enumerate() {
                        let src = t as isize + shift;
                        if src >= 0 && (src as usize) < l {
                            *acc += w * xs[src as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(seq_shape(b, c_out, l, batched), out))
}

pub(crate) fn conv1d_backward(x: &Tensor, weight: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (b, c_in, l, _) = seq_dims(x, "conv1d").expect("checked in forward");
    let [c_out, _, k] = *weight.shape() else { unreachable!() };
    let half = (k / 2) as isize;
    let (xd, wd, gd) = (x.data(), weight.data(), g.data());
    let mut gx = vec![0.0; xd.len()];
    let mut gw = vec![0.0; wd.len()];
    let mut gb = vec![0.0; c_out];
    for n in 0..b {
        for o in 0..c_out {
            let grow = &gd[(n * c_out + o) * l..(n * c_out + o + 1) * l];
            gb[o] += grow.iter().sum::<f64>();
            for c in 0..c_in {
                let xoff = (n * c_in + c) * l;
                for j in 0..k {
                    let widx = (o * c_in + c) * k + j;
                    let w = wd[widx];
                    let shift = j as isize - half;
                    let mut acc = 0.0;
                    for (t, &gv) in grow.iter().enumerate() {
                        let src = t as isize + shift;
                        if src >= 0 && (src as usize) < l {
                            let s = xoff + src as usize;
                            acc += gv * xd[s];
                            gx[s] += gv * w;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(weight.shape().to_vec(), gw),
        Tensor::from_parts(vec![c_out], gb),
    )
}

// ------------------------------------------------------------- depthwise

/// One same-padded kernel per channel. `weight` is `[C, K]`.
pub fn depthwise_conv1d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (b, c, l, batched) = seq_dims(x, "depthwise_conv1d")?;
    let [wc, k] = *weight.shape() else {
        return Err(Error::InvalidShape {
            op: "depthwise_conv1d",
            shape: weight.shape().to_vec(),
            reason: "weight must be [C, K]",
        });
    };
    expect("depthwise_conv1d", "channels", wc, c)?;
    if k % 2 == 0 {
        return Err(Error::InvalidShape {
            op: "depthwise_conv1d",
            shape: weight.shape().to_vec(),
            reason: "kernel size must be odd",
        });
    }
    check_bias("depthwise_conv1d", bias, c)?;
    let half = (k / 2) as isize;
    let (xd, wd) = (x.data(), weight.data());
    let mut out = vec![0.0; xd.len()];
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * l;
            let base = bias.map_or(0.0, |t| t.data()[ch]);
            for t in 0..l {
                let mut acc = base;
                for j in 0..k {
                    let src = t as isize + j as isize - half;
                    if src >= 0 && (src as usize) < l {
                        acc += wd[ch * k + j] * xd[off + src as usize];
                    }
                }
                out[off + t] = acc;
            }
        }
    }
    Ok(Tensor::from_parts(seq_shape(b, c, l, batched), out))
}

pub(crate) fn depthwise_backward(x: &Tensor, weight: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (b, c, l, _) = seq_dims(x, "depthwise_conv1d").expect("checked in forward");
    let k = weight.dim(1);
    let half = (k / 2) as isize;
    let (xd, wd, gd) = (x.data(), weight.data(), g.data());
    let mut gx = vec![0.0; xd.len()];
    let mut gw = vec![0.0; wd.len()];
    let mut gb = vec![0.0; c];
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * l;
            for t in 0..l {
                let gv = gd[off + t];
                gb[ch] += gv;
                for j in 0..k {
                    let src = t as isize + j as isize - half;
                    if src >= 0 && (src as usize) < l {
                        let s = off + src as usize;
                        gw[ch * k + j] += gv * xd[s];
                        gx[s] += gv * wd[ch * k + j];
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(weight.shape().to_vec(), gw),
        Tensor::from_parts(vec![c], gb),
    )
}

// --------------------------------------------------------------- pooling

/// Kernel 2, stride 2 max pooling; a trailing odd element is dropped.
/// Returns the pooled tensor and the flat source index of each maximum.
pub fn maxpool1d_with_indices(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (b, c, l, batched) = seq_dims(x, "maxpool1d")?;
    if l < 2 {
        return Err(Error::InvalidShape {
            op: "maxpool1d",
            shape: x.shape().to_vec(),
            reason: "sequence length must be at least 2",
        });
    }
    let lo = l / 2;
    let xd = x.data();
    let mut out = Vec::with_capacity(b * c * lo);
    let mut idx = Vec::with_capacity(b * c * lo);
    for row in 0..b * c {
        for t in 0..lo {
            let i = row * l + 2 * t;
            // first element wins ties
            let pick = if xd[i + 1] > xd[i] { i + 1 } else { i };
            out.push(xd[pick]);
            idx.push(pick);
        }
    }
    Ok((Tensor::from_parts(seq_shape(b, c, lo, batched), out), idx))
}

pub fn maxpool1d(x: &Tensor) -> Result<Tensor> {
    maxpool1d_with_indices(x).map(|(t, _)| t)
}

/// Mean over the time axis: `[C, L] -> [C]`, `[B, C, L] -> [B, C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (b, c, l, batched) = seq_dims(x, "global_avg_pool")?;
    let out = x.data().chunks(l).map(|row| row.iter().sum::<f64>() / l as f64).collect();
    Ok(Tensor::from_parts(vec_shape(b, c, batched), out))
}

pub(crate) fn gap_backward(x_shape: &[usize], g: &Tensor) -> Tensor {
    let l = *x_shape.last().unwrap();
    let data = g.data().iter().flat_map(|&v| std::iter::repeat_n(v / l as f64, l)).collect();
    Tensor::from_parts(x_shape.to_vec(), data)
}

// ----------------------------------------------------------------- dense

/// `y = W x + b` with `W` of shape `[M, N]`.
pub fn dense(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (b, n, batched) = vec_dims(x, "dense")?;
    let [m, wn] = *weight.shape() else {
        return Err(Error::InvalidShape {
            op: "dense",
            shape: weight.shape().to_vec(),
            reason: "weight must be [M, N]",
        });
    };
    expect("dense", "input features", wn, n)?;
    check_bias("dense", bias, m)?;
    let (xd, wd) = (x.data(), weight.data());
    let mut out = Vec::with_capacity(b * m);
    for s in 0..b {
        let xs = &xd[s * n..(s + 1) * n];
        for o in 0..m {
            let w = &wd[o * n..(o + 1) * n];
            let acc: f64 = w.iter().zip(xs).map(|(a, b)| a * b).sum();
            out.push(acc + bias.map_or(0.0, |t| t.data()[o]));
        }
    }
    Ok(Tensor::from_parts(vec_shape(b, m, batched), out))
}

pub(crate) fn dense_backward(x: &Tensor, weight: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (b, n, _) = vec_dims(x, "dense").expect("checked in forward");
    let m = weight.dim(0);
    let (xd, wd, gd) = (x.data(), weight.data(), g.data());
    let mut gx = vec![0.0; xd.len()];
    let mut gw = vec![0.0; wd.len()];
    let mut gb = vec![0.0; m];
    for s in 0..b {
        for o in 0..m {
            let gv = gd[s * m + o];
            gb[o] += gv;
            for i in 0..n {
                gw[o * n + i] += gv * xd[s * n + i];
                gx[s * n + i] += gv * wd[o * n + i];
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(weight.shape().to_vec(), gw),
        Tensor::from_parts(vec![m], gb),
    )
}

// ------------------------------------------------------------ batch norm

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Output of a train-mode batch-norm pass, kept for the backward pass and
/// for the running-statistics update.
#[derive(Clone, Debug)]
pub struct BnBatch {
    pub output: Tensor,
    pub normalized: Tensor,
    pub mean: Vec<f64>,
    /// Biased batch variance.
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub count: usize,
}

/// Batch statistics normalization over every axis except the channel axis.
pub fn batchnorm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<BnBatch> {
    let (outer, c, inner) = channel_view(x);
    expect("batchnorm1d", "gamma length", c, gamma.len())?;
    expect("batchnorm1d", "beta length", c, beta.len())?;
    let m = outer * inner;
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for o in 0..outer {
        for ch in 0..c {
            let row = &xd[(o * c + ch) * inner..(o * c + ch + 1) * inner];
            mean[ch] += row.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    for o in 0..outer {
        for ch in 0..c {
            let row = &xd[(o * c + ch) * inner..(o * c + ch + 1) * inner];
            var[ch] += row.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m as f64);
    let mut inv_std = Vec::with_capacity(c);
    for &v in &var {
        if v + eps <= 0.0 {
            return Err(Error::invalid("batch-norm variance estimate must be positive"));
        }
        inv_std.push(1.0 / (v + eps).sqrt());
    }
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for ch in 0..c {
            for t in 0..inner {
                let i = (o * c + ch) * inner + t;
                xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                out[i] = gamma.data()[ch] * xhat[i] + beta.data()[ch];
            }
        }
    }
    Ok(BnBatch {
        output: Tensor::from_parts(x.shape().to_vec(), out),
        normalized: Tensor::from_parts(x.shape().to_vec(), xhat),
        mean,
        var,
        inv_std,
        count: m,
    })
}

pub(crate) fn batchnorm_train_backward(
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (outer, c, inner) = channel_view(xhat);
    let m = (outer * inner) as f64;
    let (xh, gd) = (xhat.data(), g.data());
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for o in 0..outer {
        for ch in 0..c {
            for t in 0..inner {
                let i = (o * c + ch) * inner + t;
                ggamma[ch] += gd[i] * xh[i];
                gbeta[ch] += gd[i];
            }
        }
    }
    let mut gx = vec![0.0; xh.len()];
    for o in 0..outer {
        for ch in 0..c {
            let gam = gamma.data()[ch];
            for t in 0..inner {
                let i = (o * c + ch) * inner + t;
                let dxhat = gd[i] * gam;
                gx[i] = inv_std[ch] / m * (m * dxhat - gbeta[ch] * gam - xh[i] * ggamma[ch] * gam);
            }
        }
    }
    (
        Tensor::from_parts(xhat.shape().to_vec(), gx),
        Tensor::from_parts(vec![c], ggamma),
        Tensor::from_parts(vec![c], gbeta),
    )
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    /// Eval mode normalizes with the running statistics; train mode uses the
    /// batch statistics and folds them into the running estimates.
    pub fn forward(&mut self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        match mode {
            BnMode::Eval => {
                let scale = bn_fold_scale(&self.gamma, &self.running_var, self.eps)?;
                let shift = fold_bias(None, &scale, &self.beta, &self.running_mean)?;
                channel_affine(x, &scale, &shift)
            }
            BnMode::Train => {
                let batch = batchnorm_train(x, &self.gamma, &self.beta, self.eps)?;
                update_running_stats(&mut self.running_mean, &mut self.running_var, &batch, self.momentum);
                Ok(batch.output)
            }
        }
    }
}

/// Exponential update of running statistics; the variance estimate is the
/// unbiased one.
pub fn update_running_stats(running_mean: &mut Tensor, running_var: &mut Tensor, batch: &BnBatch, momentum: f64) {
    let m = batch.count as f64;
    let correction = if batch.count > 1 { m / (m - 1.0) } else { 1.0 };
    for (r, &v) in running_mean.data_mut().iter_mut().zip(&batch.mean) {
        *r = (1.0 - momentum) * *r + momentum * v;
    }
    for (r, &v) in running_var.data_mut().iter_mut().zip(&batch.var) {
        *r = (1.0 - momentum) * *r + momentum * v * correction;
    }
}

/// `gamma / sqrt(var + eps)`, the multiplicative half of an eval-mode
/// batch norm.
pub fn bn_fold_scale(gamma: &Tensor, var: &Tensor, eps: f64) -> Result<Tensor> {
    expect("batchnorm1d", "variance length", gamma.len(), var.len())?;
    let mut out = Vec::with_capacity(gamma.len());
    for (&g, &v) in gamma.data().iter().zip(var.data()) {
        if v + eps <= 0.0 {
            return Err(Error::invalid("batch-norm variance estimate must be positive"));
        }
        out.push(g * (1.0 / (v + eps).sqrt()));
    }
    Ok(Tensor::from_parts(vec![gamma.len()], out))
}

/// `(bias - mean) * scale + beta`; a missing bias counts as zero.
pub fn fold_bias(bias: Option<&Tensor>, scale: &Tensor, beta: &Tensor, mean: &Tensor) -> Result<Tensor> {
    let c = scale.len();
    expect("fold_bias", "beta length", c, beta.len())?;
    expect("fold_bias", "mean length", c, mean.len())?;
    check_bias("fold_bias", bias, c)?;
    let out = (0..c)
        .map(|i| {
            let b = bias.map_or(0.0, |t| t.data()[i]);
            (b - mean.data()[i]) * scale.data()[i] + beta.data()[i]
        })
        .collect();
    Ok(Tensor::from_parts(vec![c], out))
}

/// Multiplies slice `o` of `w` (along its first axis) by `scale[o]`.
pub fn scale_rows(w: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let rows = w.dim(0);
    expect("scale_rows", "rows", rows, scale.len())?;
    let per = w.len() / rows;
    let out = w.data().iter().enumerate().map(|(i, &v)| v * scale.data()[i / per]).collect();
    Ok(Tensor::from_parts(w.shape().to_vec(), out))
}

/// `y[.., c, ..] = x[.., c, ..] * scale[c] + shift[c]`.
pub fn channel_affine(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (outer, c, inner) = channel_view(x);
    expect("channel_affine", "scale length", c, scale.len())?;
    expect("channel_affine", "shift length", c, shift.len())?;
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for ch in 0..c {
            let (a, b) = (scale.data()[ch], shift.data()[ch]);
            for v in &mut out[(o * c + ch) * inner..(o * c + ch + 1) * inner] {
                *v = *v * a + b;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Batch normalization in either mode without owning the parameters.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm1d(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &mut Tensor,
    running_var: &mut Tensor,
    eps: f64,
    momentum: f64,
    mode: BnMode,
) -> Result<Tensor> {
    let mut bn = BatchNorm {
        gamma: gamma.clone(),
        beta: beta.clone(),
        running_mean: running_mean.clone(),
        running_var: running_var.clone(),
        eps,
        momentum,
    };
    let y = bn.forward(x, mode)?;
    *running_mean = bn.running_mean;
    *running_var = bn.running_var;
    Ok(y)
}

// ----------------------------------------------------------- activations

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn hardtanh(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

pub fn hardsigmoid(x: f64) -> f64 {
    (HARDSIGMOID_SLOPE * x + 0.5).clamp(0.0, 1.0)
}

pub(crate) fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

pub(crate) fn hardtanh_grad(x: f64) -> f64 {
    if x > -1.0 && x < 1.0 {
        1.0
    } else {
        0.0
    }
}

pub(crate) fn hardsigmoid_grad(x: f64) -> f64 {
    let edge = 0.5 / HARDSIGMOID_SLOPE;
    if x > -edge && x < edge {
        HARDSIGMOID_SLOPE
    } else {
        0.0
    }
}

// ------------------------------------------------------------------ LSTM

/// Weights of a single-bias LSTM layer; gate blocks are stacked in the order
/// input, forget, cell candidate, output.
#[derive(Clone, Debug)]
pub struct LstmWeights {
    /// `[4H, I]`
    pub w_ih: Tensor,
    /// `[4H, H]`
    pub w_hh: Tensor,
    /// `[4H]`
    pub bias: Tensor,
}

/// One LSTM step with hard activations. Works on `[I]`/`[H]` or batched
/// `[B, I]`/`[B, H]` inputs.
pub fn lstm_cell(x: &Tensor, h_prev: &Tensor, c_prev: &Tensor, w: &LstmWeights) -> Result<(Tensor, Tensor)> {
    let hidden = w.w_hh.dim(1);
    expect("lstm_cell", "gate rows", 4 * hidden, w.w_ih.dim(0))?;
    expect("lstm_cell", "gate rows", 4 * hidden, w.w_hh.dim(0))?;
    let (b, hn, _) = vec_dims(h_prev, "lstm_cell")?;
    expect("lstm_cell", "hidden size", hidden, hn)?;
    if c_prev.shape() != h_prev.shape() {
        return Err(Error::InvalidShape {
            op: "lstm_cell",
            shape: c_prev.shape().to_vec(),
            reason: "cell state must match hidden state shape",
        });
    }
    let zx = dense(x, &w.w_ih, Some(&w.bias))?;
    let zh = dense(h_prev, &w.w_hh, None)?;
    expect("lstm_cell", "batch", b, vec_dims(&zx, "lstm_cell")?.0)?;
    let (zx, zh) = (zx.data(), zh.data());
    let mut h = vec![0.0; b * hidden];
    let mut c = vec![0.0; b * hidden];
    for s in 0..b {
        for u in 0..hidden {
            let z = |gate: usize| {
                let i = s * 4 * hidden + gate * hidden + u;
                zx[i] + zh[i]
            };
            let ig = hardsigmoid(z(0));
            let fg = hardsigmoid(z(1));
            let gg = hardtanh(z(2));
            let og = hardsigmoid(z(3));
            let cv = fg * c_prev.data()[s * hidden + u] + ig * gg;
            c[s * hidden + u] = cv;
            h[s * hidden + u] = og * hardtanh(cv);
        }
    }
    Ok((Tensor::from_parts(h_prev.shape().to_vec(), h), Tensor::from_parts(h_prev.shape().to_vec(), c)))
}

// ------------------------------------------------------------- attention

/// `S[b][i][j] = scale * Σ_c q[b][c][i] k[b][c][j]` on channels-first inputs.
pub fn attention_scores(q: &Tensor, k: &Tensor, scale: f64) -> Result<Tensor> {
    let (b, d, n, _) = seq_dims(q, "attention_scores")?;
    if q.shape() != k.shape() {
        return Err(Error::InvalidShape {
            op: "attention_scores",
            shape: k.shape().to_vec(),
            reason: "query and key shapes differ",
        });
    }
    let (qd, kd) = (q.data(), k.data());
    let mut out = vec![0.0; b * n * n];
    for s in 0..b {
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += qd[(s * d + c) * n + i] * kd[(s * d + c) * n + j];
                }
                out[(s * n + i) * n + j] = acc * scale;
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, n, n], out))
}

pub(crate) fn attention_scores_backward(q: &Tensor, k: &Tensor, scale: f64, g: &Tensor) -> (Tensor, Tensor) {
    let (b, d, n, _) = seq_dims(q, "attention_scores").expect("checked in forward");
    let (qd, kd, gd) = (q.data(), k.data(), g.data());
    let mut gq = vec![0.0; qd.len()];
    let mut gk = vec![0.0; kd.len()];
    for s in 0..b {
        for i in 0..n {
            for j in 0..n {
                let gv = gd[(s * n + i) * n + j] * scale;
                for c in 0..d {
                    gq[(s * d + c) * n + i] += gv * kd[(s * d + c) * n + j];
                    gk[(s * d + c) * n + j] += gv * qd[(s * d + c) * n + i];
                }
            }
        }
    }
    (Tensor::from_parts(q.shape().to_vec(), gq), Tensor::from_parts(k.shape().to_vec(), gk))
}

/// Softmax along the last axis.
pub fn softmax_last(x: &Tensor) -> Tensor {
    let n = *x.shape().last().unwrap();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn softmax_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let n = *y.shape().last().unwrap();
    let mut out = vec![0.0; y.len()];
    for ((o, yr), gr) in out.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..n {
            o[j] = yr[j] * (gr[j] - dot);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

/// `A[b][c][i] = Σ_j P[b][i][j] v[b][c][j]`.
pub fn attention_mix(p: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (b, d, n, _) = seq_dims(v, "attention_mix")?;
    if p.shape() != [b, n, n] {
        return Err(Error::InvalidShape {
            op: "attention_mix",
            shape: p.shape().to_vec(),
            reason: "probabilities must be [B, n, n]",
        });
    }
    let (pd, vd) = (p.data(), v.data());
    let mut out = vec![0.0; vd.len()];
    for s in 0..b {
        for c in 0..d {
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += pd[(s * n + i) * n + j] * vd[(s * d + c) * n + j];
                }
                out[(s * d + c) * n + i] = acc;
            }
        }
    }
    Ok(Tensor::from_parts(v.shape().to_vec(), out))
}

pub(crate) fn attention_mix_backward(p: &Tensor, v: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (b, d, n, _) = seq_dims(v, "attention_mix").expect("checked in forward");
    let (pd, vd, gd) = (p.data(), v.data(), g.data());
    let mut gp = vec![0.0; pd.len()];
    let mut gv = vec![0.0; vd.len()];
    for s in 0..b {
        for c in 0..d {
            for i in 0..n {
                let go = gd[(s * d + c) * n + i];
                for j in 0..n {
                    gp[(s * n + i) * n + j] += go * vd[(s * d + c) * n + j];
                    gv[(s * d + c) * n + j] += go * pd[(s * n + i) * n + j];
                }
            }
        }
    }
    (Tensor::from_parts(p.shape().to_vec(), gp), Tensor::from_parts(v.shape().to_vec(), gv))
}

/// Projections of a one-head self-attention block; each weight is `[d, d]`
/// applied per token as `W x + b`.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

/// Single-head self-attention on a token-major `[n, d]` sequence with
/// scores scaled by `1/sqrt(d)`.
pub fn one_head_attention(x: &Tensor, w: &AttentionWeights) -> Result<Tensor> {
    let [_, d] = *x.shape() else {
        return Err(Error::InvalidShape {
            op: "one_head_attention",
            shape: x.shape().to_vec(),
            reason: "expected [n, d]",
        });
    };
    // channels-first [1, d, n]
    let xc = x.transpose()?.unsqueeze0()?;
    let proj = |wt: &Tensor, bt: &Tensor, inp: &Tensor| -> Result<Tensor> {
        let k = wt.clone().reshape(vec![wt.dim(0), wt.dim(1), 1])?;
        conv1d(inp, &k, Some(bt))
    };
    let q = proj(&w.wq, &w.bq, &xc)?;
    let k = proj(&w.wk, &w.bk, &xc)?;
    let v = proj(&w.wv, &w.bv, &xc)?;
    let p = softmax_last(&attention_scores(&q, &k, 1.0 / (d as f64).sqrt())?);
    let a = attention_mix(&p, &v)?;
    let o = proj(&w.wo, &w.bo, &a)?;
    let [_, d, n] = *o.shape() else { unreachable!() };
    Tensor::from_parts(vec![d, n], o.into_data()).transpose()
}

/// Fixed sinusoidal positional encoding laid out channels-first `[d, n]`.
pub fn sinusoidal_encoding(d: usize, n: usize) -> Tensor {
    let mut out = vec![0.0; d * n];
    for c in 0..d {
        let pair = (c / 2) as f64 * 2.0;
        let freq = 1.0 / 10000f64.powf(pair / d as f64);
        for t in 0..n {
            let angle = t as f64 * freq;
            out[c * n + t] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_parts(vec![d, n], out)
}

// ------------------------------------------------------------------ loss

/// Mean two-class (or K-class) cross-entropy over `[B, K]` logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, k, _) = vec_dims(logits, "cross_entropy")?;
    expect("cross_entropy", "labels", b, labels.len())?;
    let probs = softmax_last(logits);
    let mut loss = 0.0;
    let mut grad = probs.data().to_vec();
    for (s, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
        }
        let row = &logits.data()[s * k..(s + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        grad[s * k + y] -= 1.0;
    }
    grad.iter_mut().for_each(|g| *g /= b as f64);
    Ok((loss / b as f64, Tensor::from_parts(logits.shape().to_vec(), grad)))
}
