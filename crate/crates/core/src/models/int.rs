//! Integer-only twin of a quantized model.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::int_ops::{self, IntTensor};
use crate::quant::{self, FixedPointMultiplier, QuantParams};
use crate::tensor::Tensor;

use super::{channel_schedule, graph, Arch, Model, ModelConfig};

pub const INT_MODEL_VERSION: u32 = 1;

/// Clamp bound meaning "no saturation" for rescaled partial sums.
pub(crate) const WIDE: i64 = 1 << 40;

/// Integer tensor together with the scale it was quantized at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTensor {
    pub scale: f64,
    pub shape: Vec<usize>,
    pub data: Vec<i64>,
}

impl QTensor {
    fn int(&self) -> IntTensor {
        IntTensor { shape: self.shape.clone(), data: self.data.clone() }
    }
}

/// Fixed-point rescale followed by saturation to `[lo, hi]`; `scale` is
/// the real value of one output step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequantSpec {
    pub fpm: FixedPointMultiplier,
    pub lo: i64,
    pub hi: i64,
    pub scale: f64,
}

/// Self-contained integer model: configuration, activation parameters,
/// integer weights and the rescaling constants of every layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntModel {
    pub version: u32,
    pub config: ModelConfig,
    pub input: QuantParams,
    pub activations: BTreeMap<String, QuantParams>,
    pub tensors: BTreeMap<String, QTensor>,
    pub requants: BTreeMap<String, RequantSpec>,
}

pub(crate) fn export(model: &Model) -> Result<IntModel> {
    let state = model.quant.as_ref().ok_or_else(|| Error::MissingQuantParams("model".into()))?;
    if let Some((name, _)) = state.observers.iter().find(|(_, o)| o.is_empty()) {
        return Err(Error::MissingQuantParams(name.clone()));
    }
    let rec = graph::record(model)?;
    let input = *rec.activations.get("in").ok_or_else(|| Error::MissingQuantParams("in".into()))?;
    Ok(IntModel {
        version: INT_MODEL_VERSION,
        config: model.config.clone(),
        input,
        activations: rec.activations,
        tensors: rec.tensors,
        requants: rec.requants,
    })
}

impl IntModel {
    fn t(&self, name: &str) -> Result<&QTensor> {
        self.tensors.get(name).ok_or_else(|| Error::MissingQuantParams(name.to_string()))
    }

    fn r(&self, name: &str) -> Result<&RequantSpec> {
        self.requants.get(name).ok_or_else(|| Error::MissingQuantParams(name.to_string()))
    }

    fn rq(&self, acc: &[i64], name: &str) -> Result<Vec<i64>> {
        let s = self.r(name)?;
        int_ops::requantize_all(acc, s.fpm, s.lo, s.hi)
    }

    fn rq_t(&self, acc: &IntTensor, name: &str) -> Result<IntTensor> {
        IntTensor::new(acc.shape.clone(), self.rq(&acc.data, name)?)
    }

    /// `clamp(rescale_a(a) + rescale_b(b))` at the activation range.
    fn rescale_sum(&self, a: &[i64], b: &[i64], a_name: &str, b_name: &str) -> Result<Vec<i64>> {
        let (qmin, qmax) = quant::quant_range(self.config.bitwidth)?;
        let ra = int_ops::rescale_all(a, self.r(a_name)?.fpm)?;
        let rb = int_ops::rescale_all(b, self.r(b_name)?.fpm)?;
        Ok(ra.iter().zip(&rb).map(|(x, y)| (x + y).clamp(qmin, qmax)).collect())
    }

    /// Scale of one logit step.
    pub fn logit_scale(&self) -> Result<f64> {
        Ok(self.r("logits")?.scale)
    }

    /// Quantized input of a `[C, L]` float window.
    pub fn quantize_input(&self, x: &Tensor) -> Result<IntTensor> {
        let cfg = &self.config;
        if x.shape() != [cfg.c_in, cfg.n] {
            return Err(Error::InvalidShape {
                op: "int_forward",
                shape: x.shape().to_vec(),
                reason: "input does not match the model's channels and length",
            });
        }
        let data = x.data().iter().map(|&v| self.input.quantize(v)).collect();
        IntTensor::new(x.shape().to_vec(), data)
    }

    /// Integer logits of one `[C, L]` window.
    pub fn forward_q(&self, x: &Tensor) -> Result<Vec<i64>> {
        let xq = self.quantize_input(x)?;
        match self.config.arch {
            Arch::Cnn1d | Arch::SepCnn1d => self.cnn(xq),
            Arch::Lstm => self.lstm(&xq),
            Arch::Transformer => self.transformer(&xq),
        }
    }

    /// Dequantized logits of one `[C, L]` window.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.logit_scale()?;
        let q = self.forward_q(x)?;
        Ok(Tensor::from_vec(q.into_iter().map(|v| v as f64 * s).collect()))
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        let q = self.forward_q(x)?;
        let mut best = 0;
        for (i, &v) in q.iter().enumerate() {
            if v > q[best] {
                best = i;
            }
        }
        Ok(best)
    }

    fn dense(&self, x: &[i64], name: &str, point: &str) -> Result<Vec<i64>> {
        let w = self.t(&format!("{name}.weight"))?;
        let b = self.t(&format!("{name}.bias"))?;
        let acc = int_ops::dense_acc(x, &w.int(), Some(&b.data))?;
        self.rq(&acc, point)
    }

    fn conv(&self, x: &IntTensor, name: &str, point: &str) -> Result<IntTensor> {
        let w = self.t(&format!("{name}.weight"))?;
        let b = self.t(&format!("{name}.bias"))?;
        let acc = int_ops::conv1d_acc(x, &w.int(), &b.data, None)?;
        self.rq_t(&acc, point)
    }

    fn cnn(&self, mut h: IntTensor) -> Result<Vec<i64>> {
        let sched = channel_schedule(self.config.size())?;
        for i in 0..sched.len() {
            let p = format!("block{}", i + 1);
            if self.config.arch == Arch::SepCnn1d {
                let w = self.t(&format!("{p}.dw.weight"))?;
                let b = self.t(&format!("{p}.dw.bias"))?;
                let acc = int_ops::depthwise_acc(&h, &w.int(), &b.data)?;
                h = self.rq_t(&acc, &format!("{p}.dw"))?;
            }
            h = self.conv(&h, &format!("{p}.conv"), &p)?;
            if i + 1 < sched.len() {
                h = int_ops::maxpool(&h)?;
            }
        }
        let g = self.rq(&int_ops::gap_acc(&h)?, "gap")?;
        let d = self.dense(&g, "hidden", "hidden")?;
        self.dense(&d, "out", "logits")
    }

    fn lstm(&self, x: &IntTensor) -> Result<Vec<i64>> {
        let hs = self.config.size();
        let (qmin, qmax) = quant::quant_range(self.config.bitwidth)?;
        let n = self.config.n;
        let c_in = self.config.c_in;
        let wi = self.t("lstm.w_ih")?.int();
        let wh = self.t("lstm.w_hh")?.int();
        let bias = &self.t("lstm.bias")?.data;
        let offset = self.t("lstm.offset")?.data[0];
        let mut h = vec![0i64; hs];
        let mut c = vec![0i64; hs];
        for t in 0..n {
            let xt: Vec<i64> = (0..c_in).map(|ch| x.data[ch * n + t]).collect();
            let ax = int_ops::dense_acc(&xt, &wi, Some(bias))?;
            let ah = int_ops::dense_acc(&h, &wh, None)?;
            let z = self.rescale_sum(&ax, &ah, "z.x", "z.h")?;
            let gate = |k: usize| &z[k * hs..(k + 1) * hs];
            let sigmoid = |k: usize| -> Result<Vec<i64>> {
                let acc: Vec<i64> = gate(k).iter().map(|&v| v + offset).collect();
                self.rq(&acc, "sigmoid")
            };
            let i = sigmoid(0)?;
            let f = sigmoid(1)?;
            let o = sigmoid(3)?;
            let g = self.rq(gate(2), "tanh.g")?;
            let fc: Vec<i64> = f.iter().zip(&c).map(|(a, b)| a * b).collect();
            let ig: Vec<i64> = i.iter().zip(&g).map(|(a, b)| a * b).collect();
            c = self.rescale_sum(&fc, &ig, "c.f", "c.i")?;
            let tc = self.rq(&c, "tanh.c")?;
            let oh: Vec<i64> = o.iter().zip(&tc).map(|(a, b)| a * b).collect();
            h = self.rq(&oh, "h")?;
        }
        debug_assert!(h.iter().all(|v| (qmin..=qmax).contains(v)));
        self.dense(&h, "out", "logits")
    }

    fn bn_affine(&self, x: &IntTensor, point: &str) -> Result<IntTensor> {
        let a = self.t(&format!("{point}.scale"))?;
        let shift = self.t(&format!("{point}.shift"))?;
        let acc = int_ops::channel_affine_acc(x, &a.data, &shift.data)?;
        self.rq_t(&acc, point)
    }

    fn transformer(&self, x: &IntTensor) -> Result<Vec<i64>> {
        let w = self.t("proj.weight")?;
        let b = self.t("proj.bias")?;
        let pos = self.t("proj.pos")?;
        let acc = int_ops::conv1d_acc(x, &w.int(), &b.data, Some(&pos.int()))?;
        let e = self.rq_t(&acc, "e")?;
        let q = self.conv(&e, "q", "q")?;
        let k = self.conv(&e, "k", "k")?;
        let v = self.conv(&e, "v", "v")?;
        let s = self.rq_t(&int_ops::scores_acc(&q, &k)?, "s")?;
        let p = int_ops::softmax_rows(&s, self.r("softmax")?.fpm)?;
        let a = self.rq_t(&int_ops::mix_acc(&p, &v)?, "a")?;
        let o = self.conv(&a, "o", "o")?;
        let r1 = IntTensor::new(e.shape.clone(), self.rescale_sum(&e.data, &o.data, "r1.lhs", "r1.rhs")?)?;
        let n1 = self.bn_affine(&r1, "n1")?;
        let f1 = self.conv(&n1, "ff1", "f1")?;
        let f2 = self.conv(&f1, "ff2", "f2")?;
        let r2 = IntTensor::new(n1.shape.clone(), self.rescale_sum(&n1.data, &f2.data, "r2.lhs", "r2.rhs")?)?;
        let n2 = self.bn_affine(&r2, "n2")?;
        let g = self.rq(&int_ops::gap_acc(&n2)?, "gap")?;
        self.dense(&g, "out", "logits")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: IntModel = serde_json::from_str(s)?;
        if m.version != INT_MODEL_VERSION {
            return Err(Error::Config(format!("unsupported integer model version {}", m.version)));
        }
        m.config.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path)?;
        Self::from_json(&s).map_err(|e| match e {
            Error::Serde(source) => Error::Json { path: path.to_path_buf(), source },
            other => other,
        })
    }
}
