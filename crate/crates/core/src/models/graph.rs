//! Float and fake-quantized forward passes recorded on a [`Tape`].
//!
//! The fake-quantized pass mirrors the integer pass operation for
//! operation: every layer output goes through [`Tape::requantize`] with the
//! same fixed-point multiplier the integer kernels use. Export runs this
//! pass once with a recorder attached, so the integer model is assembled
//! from exactly the values the simulation used.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::int_ops::{softmax_exponent_ratio, PROB_ONE, PROB_SCALE};
use crate::quant::{self, FixedPointMultiplier, QuantParams, ACC_MAX, ACC_MIN};
use crate::tensor::ops::{self, BnBatch, BN_EPS};
use crate::tensor::{Tape, Tensor, Var};

use super::int::{QTensor, RequantSpec, WIDE};
use super::{channel_schedule, Arch, BnStats, Model, ModelConfig, QuantState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Float,
    FakeQuant,
    Int,
}

/// A recorded forward pass.
#[derive(Debug)]
pub struct Graph {
    pub tape: Tape,
    /// Leaves of the trainable tensors, in [`super::param_specs`] order.
    pub params: Vec<Var>,
    /// `[B, classes]`
    pub logits: Var,
    pub bn_batches: Vec<BnBatch>,
}

#[derive(Debug, Default)]
pub(crate) struct Record {
    pub tensors: BTreeMap<String, QTensor>,
    pub requants: BTreeMap<String, RequantSpec>,
    pub activations: BTreeMap<String, QuantParams>,
}

enum QuantRef<'a> {
    Observe(&'a mut QuantState),
    Frozen(&'a QuantState),
}

struct QuantCtx<'a> {
    state: QuantRef<'a>,
    bits: u32,
    qmin: i64,
    qmax: i64,
    record: Option<Record>,
}

struct Ctx<'a> {
    tape: Tape,
    params: Vec<Var>,
    next_param: usize,
    bn: &'a [BnStats],
    next_bn: usize,
    bn_batches: Vec<BnBatch>,
    train: bool,
    q: Option<QuantCtx<'a>>,
}

pub(crate) fn build(
    model: &Model,
    observe: Option<&mut QuantState>,
    x: &Tensor,
    mode: Mode,
    train: bool,
) -> Result<Graph> {
    build_inner(model, observe, x, mode, train, false).map(|(g, _)| g)
}

/// Runs the frozen fake-quantized pass on a zero input and returns the
/// recorded integer parameters.
pub(crate) fn record(model: &Model) -> Result<Record> {
    let cfg = &model.config;
    let x = Tensor::zeros(&[1, cfg.c_in, cfg.n]);
    let (_, rec) = build_inner(model, None, &x, Mode::FakeQuant, false, true)?;
    Ok(rec.expect("recording requested"))
}

fn build_inner(
    model: &Model,
    observe: Option<&mut QuantState>,
    x: &Tensor,
    mode: Mode,
    train: bool,
    record: bool,
) -> Result<(Graph, Option<Record>)> {
    let cfg = &model.config;
    let x = match x.rank() {
        2 => x.unsqueeze0()?,
        3 => x.clone(),
        _ => {
            return Err(Error::InvalidShape {
                op: "forward",
                shape: x.shape().to_vec(),
                reason: "expected [C, L] or [B, C, L]",
            })
        }
    };
    if x.dim(1) != cfg.c_in || x.dim(2) != cfg.n {
        return Err(Error::InvalidShape {
            op: "forward",
            shape: x.shape().to_vec(),
            reason: "input does not match the model's channels and length",
        });
    }
    let mut tape = Tape::new();
    let params = model.params.iter().map(|p| tape.leaf(p.tensor.clone())).collect();
    let q = match mode {
        Mode::Float => None,
        Mode::FakeQuant => {
            let state = match observe {
                Some(s) => QuantRef::Observe(s),
                None => {
                    QuantRef::Frozen(model.quant.as_ref().ok_or_else(|| Error::MissingQuantParams("model".into()))?)
                }
            };
            let (qmin, qmax) = quant::quant_range(cfg.bitwidth)?;
            Some(QuantCtx { state, bits: cfg.bitwidth, qmin, qmax, record: record.then(Record::default) })
        }
        Mode::Int => return Err(Error::invalid("integer mode has no tape representation")),
    };
    let mut ctx = Ctx { tape, params, next_param: 0, bn: &model.bn, next_bn: 0, bn_batches: Vec::new(), train, q };
    let xv = ctx.tape.leaf(x);
    let logits = match (cfg.arch, ctx.q.is_some()) {
        (Arch::Cnn1d | Arch::SepCnn1d, false) => cnn_float(&mut ctx, cfg, xv)?,
        (Arch::Cnn1d | Arch::SepCnn1d, true) => cnn_fake(&mut ctx, cfg, xv)?,
        (Arch::Lstm, false) => lstm_float(&mut ctx, cfg, xv)?,
        (Arch::Lstm, true) => lstm_fake(&mut ctx, cfg, xv)?,
        (Arch::Transformer, false) => transformer_float(&mut ctx, cfg, xv)?,
        (Arch::Transformer, true) => transformer_fake(&mut ctx, cfg, xv)?,
    };
    debug_assert_eq!(ctx.next_param, ctx.params.len());
    let record = ctx.q.as_mut().and_then(|q| q.record.take());
    Ok((Graph { tape: ctx.tape, params: ctx.params, logits, bn_batches: ctx.bn_batches }, record))
}

impl<'a> Ctx<'a> {
    fn p(&mut self) -> Var {
        let v = self.params[self.next_param];
        self.next_param += 1;
        v
    }

    fn stats(&mut self) -> &BnStats {
        let s = &self.bn[self.next_bn];
        self.next_bn += 1;
        s
    }

    fn float_bn(&mut self, x: Var) -> Result<Var> {
        let (gamma, beta) = (self.p(), self.p());
        if self.train {
            self.next_bn += 1;
            let (y, batch) = self.tape.batchnorm_train(x, gamma, beta, BN_EPS)?;
            self.bn_batches.push(batch);
            Ok(y)
        } else {
            let stats = self.stats().clone();
            let scale = self.tape.bn_fold_scale(gamma, &stats.running_var, BN_EPS)?;
            let shift = self.tape.fold_bias(None, scale, beta, &stats.running_mean)?;
            self.tape.channel_affine(x, scale, shift)
        }
    }

    fn qc(&mut self) -> &mut QuantCtx<'a> {
        // only called on fake-quant paths
        fake_ctx(&mut self.q)
    }

    /// Activation parameters of `point`, updating its observer first when
    /// observing.
    fn point(&mut self, point: &str, observed: &Tensor) -> Result<QuantParams> {
        let q = self.qc();
        let qp = match &mut q.state {
            QuantRef::Observe(s) => {
                s.observers
                    .get_mut(point)
                    .ok_or_else(|| Error::MissingQuantParams(point.to_string()))?
                    .observe_tensor(observed);
                s.params(point)?
            }
            QuantRef::Frozen(s) => s.params(point)?,
        };
        if let Some(r) = &mut q.record {
            r.activations.entry(point.to_string()).or_insert(qp);
        }
        Ok(qp)
    }

    fn peek_scale(&self, point: &str) -> Option<f64> {
        let q = self.q.as_ref()?;
        let s = match &q.state {
            QuantRef::Observe(s) => s.params(point),
            QuantRef::Frozen(s) => s.params(point),
        };
        s.ok().map(|p| p.scale)
    }

    fn input(&mut self, x: Var) -> Result<(Var, f64)> {
        let xv = self.tape.value(x).clone();
        let qp = self.point("in", &xv)?;
        Ok((self.tape.quantize(x, qp.scale, qp.qmin, qp.qmax), qp.scale))
    }

    fn rec_tensor(&mut self, name: &str, scale: f64, value: &Tensor, lo: i64, hi: i64) {
        if let Some(r) = &mut self.qc().record {
            r.tensors.entry(name.to_string()).or_insert_with(|| QTensor {
                scale,
                shape: value.shape().to_vec(),
                data: quant::quantize_tensor(value, scale, lo, hi),
            });
        }
    }

    fn rec_requant(&mut self, name: &str, spec: RequantSpec) {
        if let Some(r) = &mut self.qc().record {
            r.requants.entry(name.to_string()).or_insert(spec);
        }
    }

    /// Per-tensor symmetric weight quantization.
    fn qweight(&mut self, w: Var, name: &str) -> Result<(Var, f64)> {
        let bits = self.qc().bits;
        let qp = QuantParams::for_weights(bits, self.tape.value(w))?;
        let value = self.tape.value(w).clone();
        self.rec_tensor(name, qp.scale, &value, qp.qmin, qp.qmax);
        Ok((self.tape.quantize(w, qp.scale, qp.qmin, qp.qmax), qp.scale))
    }

    /// Quantization at accumulator scale into 32 bits.
    fn qacc(&mut self, v: Var, acc_scale: f64, name: &str) -> Var {
        let value = self.tape.value(v).clone();
        self.rec_tensor(name, acc_scale, &value, ACC_MIN, ACC_MAX);
        self.tape.quantize(v, acc_scale, ACC_MIN, ACC_MAX)
    }

    /// Requantizes accumulators at `acc_scale` (real value scaled by `gain`)
    /// to the activation parameters of `point`.
    fn requant(&mut self, x: Var, acc_scale: f64, gain: f64, point: &str, relu: bool) -> Result<(Var, f64)> {
        let observed = if gain == 1.0 { self.tape.value(x).clone() } else { self.tape.value(x).map(|v| v * gain) };
        let qp = self.point(point, &observed)?;
        let fpm = FixedPointMultiplier::from_ratio(acc_scale * gain / qp.scale)?;
        let lo = if relu { 0 } else { qp.qmin };
        self.rec_requant(point, RequantSpec { fpm, lo, hi: qp.qmax, scale: qp.scale });
        let y = self.tape.requantize(x, acc_scale, fpm, lo, qp.qmax, qp.scale)?;
        Ok((y, qp.scale))
    }

    /// Requantization to a fixed output scale and range.
    fn requant_fixed(&mut self, x: Var, acc_scale: f64, out_scale: f64, lo: i64, hi: i64, name: &str) -> Result<Var> {
        let fpm = FixedPointMultiplier::from_ratio(acc_scale / out_scale)?;
        self.rec_requant(name, RequantSpec { fpm, lo, hi, scale: out_scale });
        self.tape.requantize(x, acc_scale, fpm, lo, hi, out_scale)
    }

    /// `clamp(rescale(a) + rescale(b))` at the parameters of `point`.
    #[allow(clippy::too_many_arguments)]
    fn rescale_sum(
        &mut self,
        a: Var,
        a_scale: f64,
        b: Var,
        b_scale: f64,
        point: &str,
        a_name: &str,
        b_name: &str,
    ) -> Result<(Var, f64)> {
        let observed = self.tape.value(a).zip_map(self.tape.value(b), |x, y| x + y)?;
        let qp = self.point(point, &observed)?;
        let fa = FixedPointMultiplier::from_ratio(a_scale / qp.scale)?;
        let fb = FixedPointMultiplier::from_ratio(b_scale / qp.scale)?;
        self.rec_requant(a_name, RequantSpec { fpm: fa, lo: -WIDE, hi: WIDE, scale: qp.scale });
        self.rec_requant(b_name, RequantSpec { fpm: fb, lo: -WIDE, hi: WIDE, scale: qp.scale });
        let ra = self.tape.requantize(a, a_scale, fa, -WIDE, WIDE, qp.scale)?;
        let rb = self.tape.requantize(b, b_scale, fb, -WIDE, WIDE, qp.scale)?;
        let sum = self.tape.add(ra, rb)?;
        Ok((self.tape.quantize(sum, qp.scale, qp.qmin, qp.qmax), qp.scale))
    }

    /// Quantized dense layer `name` followed by requantization to `point`.
    fn fake_dense(&mut self, x: Var, s_in: f64, name: &str, point: &str, relu: bool) -> Result<(Var, f64)> {
        let (w, b) = (self.p(), self.p());
        let (wq, sw) = self.qweight(w, &format!("{name}.weight"))?;
        let acc = s_in * sw;
        let bq = self.qacc(b, acc, &format!("{name}.bias"));
        let y = self.tape.dense(x, wq, Some(bq))?;
        self.requant(y, acc, 1.0, point, relu)
    }

    /// Quantized pointwise or full convolution `name` plus requantization.
    fn fake_conv(&mut self, x: Var, s_in: f64, name: &str, point: &str, relu: bool) -> Result<(Var, f64)> {
        let (w, b) = (self.p(), self.p());
        let (wq, sw) = self.qweight(w, &format!("{name}.weight"))?;
        let acc = s_in * sw;
        let bq = self.qacc(b, acc, &format!("{name}.bias"));
        let y = self.tape.conv1d(x, wq, Some(bq))?;
        self.requant(y, acc, 1.0, point, relu)
    }

    /// Frozen batch norm as a quantized per-channel affine map.
    fn fake_bn_affine(&mut self, x: Var, s_in: f64, point: &str) -> Result<(Var, f64)> {
        let (gamma, beta) = (self.p(), self.p());
        let stats = self.stats().clone();
        let a = self.tape.bn_fold_scale(gamma, &stats.running_var, BN_EPS)?;
        let shift = self.tape.fold_bias(None, a, beta, &stats.running_mean)?;
        let (aq, sa) = self.qweight(a, &format!("{point}.scale"))?;
        let acc = s_in * sa;
        let shq = self.qacc(shift, acc, &format!("{point}.shift"));
        let y = self.tape.channel_affine(x, aq, shq)?;
        self.requant(y, acc, 1.0, point, false)
    }
}

fn fake_ctx<'b, 'a>(q: &'b mut Option<QuantCtx<'a>>) -> &'b mut QuantCtx<'a> {
    q.as_mut().expect("quantization context on the fake-quant path")
}

fn relu_dense(ctx: &mut Ctx, x: Var, relu: bool) -> Result<Var> {
    let (w, b) = (ctx.p(), ctx.p());
    let y = ctx.tape.dense(x, w, Some(b))?;
    Ok(if relu { ctx.tape.relu(y) } else { y })
}

// ------------------------------------------------------------ CNN / SepCNN

fn cnn_float(ctx: &mut Ctx, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let sched = channel_schedule(cfg.size())?;
    let mut h = x;
    for i in 0..sched.len() {
        if cfg.arch == Arch::SepCnn1d {
            let (w, b) = (ctx.p(), ctx.p());
            h = ctx.tape.depthwise_conv1d(h, w, Some(b))?;
        }
        let (w, b) = (ctx.p(), ctx.p());
        h = ctx.tape.conv1d(h, w, Some(b))?;
        h = ctx.float_bn(h)?;
        h = ctx.tape.relu(h);
        if i + 1 < sched.len() {
            h = ctx.tape.maxpool1d(h)?;
        }
    }
    let g = ctx.tape.global_avg_pool(h)?;
    let d = relu_dense(ctx, g, true)?;
    relu_dense(ctx, d, false)
}

fn cnn_fake(ctx: &mut Ctx, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let sched = channel_schedule(cfg.size())?;
    let (mut h, mut s) = ctx.input(x)?;
    for i in 0..sched.len() {
        let p = format!("block{}", i + 1);
        if cfg.arch == Arch::SepCnn1d {
            let (w, b) = (ctx.p(), ctx.p());
            let (wq, sw) = ctx.qweight(w, &format!("{p}.dw.weight"))?;
            let acc = s * sw;
            let bq = ctx.qacc(b, acc, &format!("{p}.dw.bias"));
            let y = ctx.tape.depthwise_conv1d(h, wq, Some(bq))?;
            (h, s) = ctx.requant(y, acc, 1.0, &format!("{p}.dw"), false)?;
        }
        let (w, b, gamma, beta) = (ctx.p(), ctx.p(), ctx.p(), ctx.p());
        let stats = ctx.stats().clone();
        let a = ctx.tape.bn_fold_scale(gamma, &stats.running_var, BN_EPS)?;
        let wf = ctx.tape.scale_rows(w, a)?;
        let bf = ctx.tape.fold_bias(Some(b), a, beta, &stats.running_mean)?;
        let (wq, sw) = ctx.qweight(wf, &format!("{p}.conv.weight"))?;
        let acc = s * sw;
        let bq = ctx.qacc(bf, acc, &format!("{p}.conv.bias"));
        let y = ctx.tape.conv1d(h, wq, Some(bq))?;
        (h, s) = ctx.requant(y, acc, 1.0, &p, true)?;
        if i + 1 < sched.len() {
            h = ctx.tape.maxpool1d(h)?;
        }
    }
    let l = ctx.tape.value(h).dim(2);
    let g = ctx.tape.global_avg_pool(h)?;
    let (g, s) = ctx.requant(g, s / l as f64, 1.0, "gap", false)?;
    let (d, s) = ctx.fake_dense(g, s, "hidden", "hidden", true)?;
    Ok(ctx.fake_dense(d, s, "out", "logits", false)?.0)
}

// -------------------------------------------------------------------- LSTM

fn lstm_float(ctx: &mut Ctx, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let hs = cfg.size();
    let b = ctx.tape.value(x).dim(0);
    let (w_ih, w_hh, bias) = (ctx.p(), ctx.p(), ctx.p());
    let mut h = ctx.tape.leaf(Tensor::zeros(&[b, hs]));
    let mut c = ctx.tape.leaf(Tensor::zeros(&[b, hs]));
    for t in 0..cfg.n {
        let xt = ctx.tape.time_step(x, t)?;
        let zx = ctx.tape.dense(xt, w_ih, Some(bias))?;
        let zh = ctx.tape.dense(h, w_hh, None)?;
        let z = ctx.tape.add(zx, zh)?;
        let gate = |ctx: &mut Ctx, k: usize| ctx.tape.slice_last(z, k * hs, hs);
        let i = gate(ctx, 0)?;
        let i = ctx.tape.hardsigmoid(i);
        let f = gate(ctx, 1)?;
        let f = ctx.tape.hardsigmoid(f);
        let g = gate(ctx, 2)?;
        let g = ctx.tape.hardtanh(g);
        let o = gate(ctx, 3)?;
        let o = ctx.tape.hardsigmoid(o);
        let fc = ctx.tape.mul(f, c)?;
        let ig = ctx.tape.mul(i, g)?;
        c = ctx.tape.add(fc, ig)?;
        let tc = ctx.tape.hardtanh(c);
        h = ctx.tape.mul(o, tc)?;
    }
    relu_dense(ctx, h, false)
}

fn lstm_fake(ctx: &mut Ctx, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let hs = cfg.size();
    let b = ctx.tape.value(x).dim(0);
    let qmax = ctx.qc().qmax;
    let qmin = ctx.qc().qmin;
    // gate outputs, hard-tanh outputs and the hidden state live in [-1, 1]
    let unit = 1.0 / qmax as f64;
    let (xq, s_in) = ctx.input(x)?;
    let (w_ih, w_hh, bias) = (ctx.p(), ctx.p(), ctx.p());
    let (wi, swi) = ctx.qweight(w_ih, "lstm.w_ih")?;
    let (wh, swh) = ctx.qweight(w_hh, "lstm.w_hh")?;
    let acc_x = s_in * swi;
    let acc_h = unit * swh;
    let bq = ctx.qacc(bias, acc_x, "lstm.bias");
    let mut h = ctx.tape.leaf(Tensor::zeros(&[b, hs]));
    let mut c = ctx.tape.leaf(Tensor::zeros(&[b, hs]));
    let mut s_c = ctx.peek_scale("c").unwrap_or(1.0);
    for t in 0..cfg.n {
        let xt = ctx.tape.time_step(xq, t)?;
        let ax = ctx.tape.dense(xt, wi, Some(bq))?;
        let ah = ctx.tape.dense(h, wh, None)?;
        let (z, s_z) = ctx.rescale_sum(ax, acc_x, ah, acc_h, "z", "z.x", "z.h")?;
        // hardsigmoid(v) = (q + 2/s_z) * s_z/4 on the integer grid
        let offset = quant::round_half_away(2.0 / s_z);
        let off_t = Tensor::scalar(offset * s_z);
        ctx.rec_tensor("lstm.offset", s_z, &off_t, ACC_MIN, ACC_MAX);
        let sig_acc = s_z * 0.25;
        let sigmoid = |ctx: &mut Ctx, k: usize| -> Result<Var> {
            let zk = ctx.tape.slice_last(z, k * hs, hs)?;
            let shifted = ctx.tape.affine(zk, 0.25, 0.25 * (offset * s_z));
            ctx.requant_fixed(shifted, sig_acc, unit, 0, qmax, "sigmoid")
        };
        let i = sigmoid(ctx, 0)?;
        let f = sigmoid(ctx, 1)?;
        let o = sigmoid(ctx, 3)?;
        let zg = ctx.tape.slice_last(z, 2 * hs, hs)?;
        let g = ctx.requant_fixed(zg, s_z, unit, -qmax, qmax, "tanh.g")?;
        let fc = ctx.tape.mul(f, c)?;
        let ig = ctx.tape.mul(i, g)?;
        let (cn, s_cn) = ctx.rescale_sum(fc, unit * s_c, ig, unit * unit, "c", "c.f", "c.i")?;
        c = cn;
        s_c = s_cn;
        let tc = ctx.requant_fixed(c, s_c, unit, -qmax, qmax, "tanh.c")?;
        let oh = ctx.tape.mul(o, tc)?;
        h = ctx.requant_fixed(oh, unit * unit, unit, qmin, qmax, "h")?;
    }
    Ok(ctx.fake_dense(h, unit, "out", "logits", false)?.0)
}

// ------------------------------------------------------------- Transformer

fn transformer_float(ctx: &mut Ctx, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let d = cfg.size();
    let conv = |ctx: &mut Ctx, x: Var| -> Result<Var> {
        let (w, b) = (ctx.p(), ctx.p());
        ctx.tape.conv1d(x, w, Some(b))
    };
    let y = conv(ctx, x)?;
    let pe = ctx.tape.leaf(ops::sinusoidal_encoding(d, cfg.n));
    let e = ctx.tape.add(y, pe)?;
    let q = conv(ctx, e)?;
    let k = conv(ctx, e)?;
    let v = conv(ctx, e)?;
    let s = ctx.tape.attention_scores(q, k, 1.0 / (d as f64).sqrt())?;
    let p = ctx.tape.softmax(s);
    let a = ctx.tape.attention_mix(p, v)?;
    let o = conv(ctx, a)?;
    let r1 = ctx.tape.add(e, o)?;
    let n1 = ctx.float_bn(r1)?;
    let f1 = conv(ctx, n1)?;
    let f1 = ctx.tape.relu(f1);
    let f2 = conv(ctx, f1)?;
    let r2 = ctx.tape.add(n1, f2)?;
    let n2 = ctx.float_bn(r2)?;
    let g = ctx.tape.global_avg_pool(n2)?;
    relu_dense(ctx, g, false)
}

fn transformer_fake(ctx: &mut Ctx, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let d = cfg.size();
    let (xq, s_in) = ctx.input(x)?;

    let (w, b) = (ctx.p(), ctx.p());
    let (wq, sw) = ctx.qweight(w, "proj.weight")?;
    let acc = s_in * sw;
    let bq = ctx.qacc(b, acc, "proj.bias");
    let pe = ctx.tape.leaf(ops::sinusoidal_encoding(d, cfg.n));
    let peq = ctx.qacc(pe, acc, "proj.pos");
    let y = ctx.tape.conv1d(xq, wq, Some(bq))?;
    let y = ctx.tape.add(y, peq)?;
    let (e, s_e) = ctx.requant(y, acc, 1.0, "e", false)?;

    let (q, s_q) = ctx.fake_conv(e, s_e, "q", "q", false)?;
    let (k, s_k) = ctx.fake_conv(e, s_e, "k", "k", false)?;
    let (v, s_v) = ctx.fake_conv(e, s_e, "v", "v", false)?;

    let scores = ctx.tape.attention_scores(q, k, 1.0)?;
    let (sq, s_s) = ctx.requant(scores, s_q * s_k, 1.0 / (d as f64).sqrt(), "s", false)?;
    let to_exp2 = FixedPointMultiplier::from_ratio(softmax_exponent_ratio(s_s))?;
    ctx.rec_requant("softmax", RequantSpec { fpm: to_exp2, lo: 0, hi: PROB_ONE, scale: PROB_SCALE });
    let p = ctx.tape.lut_softmax(sq, s_s, to_exp2)?;
    let mixed = ctx.tape.attention_mix(p, v)?;
    let (a, s_a) = ctx.requant(mixed, PROB_SCALE * s_v, 1.0, "a", false)?;
    let (o, s_o) = ctx.fake_conv(a, s_a, "o", "o", false)?;

    let (r1, s_r1) = ctx.rescale_sum(e, s_e, o, s_o, "r1", "r1.lhs", "r1.rhs")?;
    let (n1, s_n1) = ctx.fake_bn_affine(r1, s_r1, "n1")?;
    let (f1, s_f1) = ctx.fake_conv(n1, s_n1, "ff1", "f1", true)?;
    let (f2, s_f2) = ctx.fake_conv(f1, s_f1, "ff2", "f2", false)?;
    let (r2, s_r2) = ctx.rescale_sum(n1, s_n1, f2, s_f2, "r2", "r2.lhs", "r2.rhs")?;
    let (n2, s_n2) = ctx.fake_bn_affine(r2, s_r2, "n2")?;

    let g = ctx.tape.global_avg_pool(n2)?;
    let (g, s_g) = ctx.requant(g, s_n2 / cfg.n as f64, 1.0, "gap", false)?;
    Ok(ctx.fake_dense(g, s_g, "out", "logits", false)?.0)
}
