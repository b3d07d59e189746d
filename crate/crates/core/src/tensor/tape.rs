//! Define-by-run reverse-mode differentiation over whole-tensor operations.
//!
//! Every call on [`Tape`] evaluates one kernel from [`super::ops`] right
//! away and records it. [`Tape::backward`] then walks the record in exact
//! reverse order, accumulating vector-Jacobian products.

use crate::error::{Error, Result};
use crate::quant::{self, int_ops, FixedPointMultiplier};

use super::ops;
use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d { x: Var, w: Var, b: Option<Var> },
    Depthwise { x: Var, w: Var, b: Option<Var> },
    MaxPool { x: Var, idx: Vec<usize> },
    Gap { x: Var },
    Dense { x: Var, w: Var, b: Option<Var> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    Relu { x: Var },
    HardSigmoid { x: Var },
    HardTanh { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { x: Var, scale: f64 },
    MulConst { x: Var, c: Tensor },
    ScaleRows { w: Var, s: Var },
    ChannelAffine { x: Var, scale: Var, shift: Var },
    FoldBias { bias: Option<Var>, scale: Var, beta: Var, mean: Tensor },
    TimeStep { x: Var, t: usize },
    Slice { x: Var, start: usize, len: usize },
    Scores { q: Var, k: Var, scale: f64 },
    Softmax { x: Var },
    Mix { p: Var, v: Var },
    Straight { x: Var, pass: Vec<bool> },
    CrossEntropy { logits: Var, grad: Tensor },
    Sum { x: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not
    /// contribute.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = ops::conv1d(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(y, Op::Conv1d { x, w, b }))
    }

    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = ops::depthwise_conv1d(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(y, Op::Depthwise { x, w, b }))
    }

    pub fn maxpool1d(&mut self, x: Var) -> Result<Var> {
        let (y, idx) = ops::maxpool1d_with_indices(self.value(x))?;
        Ok(self.push(y, Op::MaxPool { x, idx }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::Gap { x }))
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = ops::dense(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(y, Op::Dense { x, w, b }))
    }

    /// Train-mode batch norm. Returns the output and the batch statistics
    /// so the caller can update its running estimates.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, ops::BnBatch)> {
        let batch = ops::batchnorm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let op = Op::BatchNorm { x, gamma, beta, xhat: batch.normalized.clone(), inv_std: batch.inv_std.clone() };
        let v = self.push(batch.output.clone(), op);
        Ok((v, batch))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(ops::relu);
        self.push(y, Op::Relu { x })
    }

    pub fn hardsigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(ops::hardsigmoid);
        self.push(y, Op::HardSigmoid { x })
    }

    pub fn hardtanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(ops::hardtanh);
        self.push(y, Op::HardTanh { x })
    }

    /// Elementwise sum. `b` may also match only the trailing axes of `a`, in
    /// which case it is broadcast over the leading axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let y = if av.shape() == bv.shape() {
            av.zip_map(bv, |x, y| x + y)?
        } else if av.rank() == bv.rank() + 1 && av.shape()[1..] == *bv.shape() {
            let n = bv.len();
            let data = av.data().iter().enumerate().map(|(i, &x)| x + bv.data()[i % n]).collect();
            Tensor::from_parts(av.shape().to_vec(), data)
        } else {
            return Err(Error::InvalidShape {
                op: "add",
                shape: bv.shape().to_vec(),
                reason: "operand is not broadcastable",
            });
        };
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(y, Op::Mul { a, b }))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let y = self.value(x).map(|v| scale * v + shift);
        self.push(y, Op::Affine { x, scale })
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let y = self.value(x).zip_map(&c, |a, b| a * b)?;
        Ok(self.push(y, Op::MulConst { x, c }))
    }

    /// `gamma / sqrt(var + eps)` with `var` held constant.
    pub fn bn_fold_scale(&mut self, gamma: Var, var: &Tensor, eps: f64) -> Result<Var> {
        let ones = Tensor::filled(var.shape(), 1.0);
        let inv = ops::bn_fold_scale(&ones, var, eps)?;
        let y = ops::bn_fold_scale(self.value(gamma), var, eps)?;
        Ok(self.push(y, Op::MulConst { x: gamma, c: inv }))
    }

    pub fn scale_rows(&mut self, w: Var, s: Var) -> Result<Var> {
        let y = ops::scale_rows(self.value(w), self.value(s))?;
        Ok(self.push(y, Op::ScaleRows { w, s }))
    }

    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let y = ops::channel_affine(self.value(x), self.value(scale), self.value(shift))?;
        Ok(self.push(y, Op::ChannelAffine { x, scale, shift }))
    }

    /// `(bias - mean) * scale + beta` with constant `mean`.
    pub fn fold_bias(&mut self, bias: Option<Var>, scale: Var, beta: Var, mean: &Tensor) -> Result<Var> {
        let y = ops::fold_bias(bias.map(|b| self.value(b)), self.value(scale), self.value(beta), mean)?;
        Ok(self.push(y, Op::FoldBias { bias, scale, beta, mean: mean.clone() }))
    }

    /// Column `t` of a `[B, C, L]` sequence as `[B, C]`.
    pub fn time_step(&mut self, x: Var, t: usize) -> Result<Var> {
        let (b, c, l, _) = ops::seq_dims(self.value(x), "time_step")?;
        if t >= l {
            return Err(Error::invalid(format!("time step {t} out of range for length {l}")));
        }
        let xd = self.value(x).data();
        let data = (0..b * c).map(|row| xd[row * l + t]).collect();
        let y = Tensor::from_parts(vec![b, c], data);
        Ok(self.push(y, Op::TimeStep { x, t }))
    }

    /// `len` entries of the last axis starting at `start`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap();
        if start + len > n || len == 0 {
            return Err(Error::invalid(format!("slice {start}+{len} out of range for {n}")));
        }
        let data = xv.data().chunks(n).flat_map(|r| r[start..start + len].to_vec()).collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let y = Tensor::from_parts(shape, data);
        Ok(self.push(y, Op::Slice { x, start, len }))
    }

    pub fn attention_scores(&mut self, q: Var, k: Var, scale: f64) -> Result<Var> {
        let y = ops::attention_scores(self.value(q), self.value(k), scale)?;
        Ok(self.push(y, Op::Scores { q, k, scale }))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let y = ops::softmax_last(self.value(x));
        self.push(y, Op::Softmax { x })
    }

    /// Integer softmax along the last axis of quantized scores that sit
    /// exactly on the grid `score_scale * Z`; outputs Q0.16 probabilities as
    /// floats. The gradient is that of the exact softmax.
    pub fn lut_softmax(&mut self, x: Var, score_scale: f64, to_exp2: FixedPointMultiplier) -> Result<Var> {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap();
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(n) {
            let ints = row.iter().map(|&v| quant::recover_accumulator(v, score_scale)).collect::<Result<Vec<_>>>()?;
            data.extend(int_ops::softmax_row(&ints, to_exp2).into_iter().map(|p| p as f64 * int_ops::PROB_SCALE));
        }
        let y = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(y, Op::Softmax { x }))
    }

    pub fn attention_mix(&mut self, p: Var, v: Var) -> Result<Var> {
        let y = ops::attention_mix(self.value(p), self.value(v))?;
        Ok(self.push(y, Op::Mix { p, v }))
    }

    /// Rounds onto the grid `scale * [lo, hi]`. The gradient is the
    /// straight-through estimate: one where the rounded value lies inside
    /// the range, zero where it saturates.
    pub fn quantize(&mut self, x: Var, scale: f64, lo: i64, hi: i64) -> Var {
        let xv = self.value(x);
        let mut pass = Vec::with_capacity(xv.len());
        let data = xv
            .data()
            .iter()
            .map(|&v| {
                let r = quant::round_half_away(v / scale);
                pass.push(r >= lo as f64 && r <= hi as f64);
                quant::clamp_wide(r, lo, hi) as f64 * scale
            })
            .collect();
        let y = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(y, Op::Straight { x, pass })
    }

    /// Simulates integer requantization: recovers the integer accumulator
    /// `x / acc_scale`, rescales it with `fpm` exactly as the integer kernels
    /// do, clamps to `[lo, hi]` and dequantizes at `out_scale`.
    /// Straight-through gradient as in [`Tape::quantize`].
    pub fn requantize(
        &mut self,
        x: Var,
        acc_scale: f64,
        fpm: FixedPointMultiplier,
        lo: i64,
        hi: i64,
        out_scale: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let mut pass = Vec::with_capacity(xv.len());
        let mut data = Vec::with_capacity(xv.len());
        for &v in xv.data() {
            let acc = quant::recover_accumulator(v, acc_scale)?;
            let r = fpm.apply(acc);
            pass.push(r >= lo && r <= hi);
            data.push(r.clamp(lo, hi) as f64 * out_scale);
        }
        let y = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(y, Op::Straight { x, pass }))
    }

    /// Mean cross-entropy of `[B, K]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, grad) = ops::cross_entropy(self.value(logits), labels)?;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, grad }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum { x })
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = |v: Var, t: Tensor| accumulate(&mut grads, v, t);
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv1d { x, w, b } => {
                    let (gx, gw, gb) = ops::conv1d_backward(self.value(*x), self.value(*w), &g);
                    acc(*x, gx);
                    acc(*w, gw);
                    if let Some(b) = b {
                        acc(*b, gb);
                    }
                }
                Op::Depthwise { x, w, b } => {
                    let (gx, gw, gb) = ops::depthwise_backward(self.value(*x), self.value(*w), &g);
                    acc(*x, gx);
                    acc(*w, gw);
                    if let Some(b) = b {
                        acc(*b, gb);
                    }
                }
                Op::MaxPool { x, idx } => {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    for (&src, &gv) in idx.iter().zip(g.data()) {
                        gx.data_mut()[src] += gv;
                    }
                    acc(*x, gx);
                }
                Op::Gap { x } => acc(*x, ops::gap_backward(self.value(*x).shape(), &g)),
                Op::Dense { x, w, b } => {
                    let (gx, gw, gb) = ops::dense_backward(self.value(*x), self.value(*w), &g);
                    acc(*x, gx);
                    acc(*w, gw);
                    if let Some(b) = b {
                        acc(*b, gb);
                    }
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                    let (gx, gg, gb) = ops::batchnorm_train_backward(xhat, inv_std, self.value(*gamma), &g);
                    acc(*x, gx);
                    acc(*gamma, gg);
                    acc(*beta, gb);
                }
                Op::Relu { x } => acc(*x, masked(&g, self.value(*x), ops::relu_grad)),
                Op::HardSigmoid { x } => acc(*x, masked(&g, self.value(*x), ops::hardsigmoid_grad)),
                Op::HardTanh { x } => acc(*x, masked(&g, self.value(*x), ops::hardtanh_grad)),
                Op::Add { a, b } => {
                    let bshape = self.value(*b).shape().to_vec();
                    if bshape == g.shape() {
                        acc(*b, g.clone());
                    } else {
                        let n = self.value(*b).len();
                        let mut gb = vec![0.0; n];
                        for (k, &v) in g.data().iter().enumerate() {
                            gb[k % n] += v;
                        }
                        acc(*b, Tensor::from_parts(bshape, gb));
                    }
                    acc(*a, g);
                }
                Op::Mul { a, b } => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                    let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Affine { x, scale } => acc(*x, g.map(|v| v * scale)),
                Op::MulConst { x, c } => acc(*x, g.zip_map(c, |a, b| a * b)?),
                Op::ScaleRows { w, s } => {
                    let wv = self.value(*w);
                    let rows = wv.dim(0);
                    let per = wv.len() / rows;
                    let mut gs = vec![0.0; rows];
                    for (k, (&gv, &x)) in g.data().iter().zip(wv.data()).enumerate() {
                        gs[k / per] += gv * x;
                    }
                    acc(*w, ops::scale_rows(&g, self.value(*s))?);
                    acc(*s, Tensor::from_parts(vec![rows], gs));
                }
                Op::ChannelAffine { x, scale, shift } => {
                    let xv = self.value(*x);
                    let (outer, c, inner) = ops::channel_view(xv);
                    let mut gscale = vec![0.0; c];
                    let mut gshift = vec![0.0; c];
                    for o in 0..outer {
                        for ch in 0..c {
                            for t in 0..inner {
                                let k = (o * c + ch) * inner + t;
                                gscale[ch] += g.data()[k] * xv.data()[k];
                                gshift[ch] += g.data()[k];
                            }
                        }
                    }
                    let zeros = Tensor::zeros(&[c]);
                    acc(*x, ops::channel_affine(&g, self.value(*scale), &zeros)?);
                    acc(*scale, Tensor::from_parts(vec![c], gscale));
                    acc(*shift, Tensor::from_parts(vec![c], gshift));
                }
                Op::FoldBias { bias, scale, beta, mean } => {
                    let sv = self.value(*scale);
                    let gscale = (0..sv.len())
                        .map(|k| {
                            let b = bias.map_or(0.0, |b| self.value(b).data()[k]);
                            g.data()[k] * (b - mean.data()[k])
                        })
                        .collect();
                    if let Some(b) = bias {
                        acc(*b, g.zip_map(sv, |a, s| a * s)?);
                    }
                    acc(*scale, Tensor::from_parts(vec![sv.len()], gscale));
                    acc(*beta, g);
                }
                Op::TimeStep { x, t } => {
                    let xv = self.value(*x);
                    let l = xv.dim(2);
                    let mut gx = Tensor::zeros(xv.shape());
                    for (row, &gv) in g.data().iter().enumerate() {
                        gx.data_mut()[row * l + t] = gv;
                    }
                    acc(*x, gx);
                }
                Op::Slice { x, start, len } => {
                    let xv = self.value(*x);
                    let n = *xv.shape().last().unwrap();
                    let mut gx = Tensor::zeros(xv.shape());
                    for (row, gr) in g.data().chunks(*len).enumerate() {
                        gx.data_mut()[row * n + start..row * n + start + len].copy_from_slice(gr);
                    }
                    acc(*x, gx);
                }
                Op::Scores { q, k, scale } => {
                    let (gq, gk) = ops::attention_scores_backward(self.value(*q), self.value(*k), *scale, &g);
                    acc(*q, gq);
                    acc(*k, gk);
                }
                Op::Softmax { x } => acc(*x, ops::softmax_backward(&node.value, &g)),
                Op::Mix { p, v } => {
                    let (gp, gv) = ops::attention_mix_backward(self.value(*p), self.value(*v), &g);
                    acc(*p, gp);
                    acc(*v, gv);
                }
                Op::Straight { x, pass } => {
                    let data = g.data().iter().zip(pass).map(|(&v, &p)| if p { v } else { 0.0 }).collect();
                    acc(*x, Tensor::from_parts(g.shape().to_vec(), data));
                }
                Op::CrossEntropy { logits, grad } => {
                    let s = g.item();
                    acc(*logits, grad.map(|v| v * s));
                }
                Op::Sum { x } => {
                    let s = g.item();
                    acc(*x, Tensor::filled(self.value(*x).shape(), s));
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(t.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(t),
    }
}

fn masked(g: &Tensor, x: &Tensor, d: fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(g.shape().to_vec(), g.data().iter().zip(x.data()).map(|(&gv, &xv)| gv * d(xv)).collect())
}
