//! The four classifiers: configuration, parameter and MAC accounting, and
//! the float, fake-quantized and integer forward paths.

mod config;
mod graph;
mod int;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{QuantParams, RangeObserver};
use crate::tensor::ops::BnBatch;
use crate::tensor::Tensor;

pub use config::{
    block_lengths, channel_schedule, dense_hidden, mac_count, param_count, Arch, ModelConfig, DEFAULT_CLASSES,
    DEFAULT_C_IN, DEFAULT_N, KERNEL, MAX_BLOCKS,
};
pub use graph::{Graph, Mode};
pub use int::{IntModel, QTensor, RequantSpec, INT_MODEL_VERSION};

pub const MODEL_VERSION: u32 = 1;
pub const FOREFOOT: usize = 0;
pub const HEEL: usize = 1;
pub const CLASS_NAMES: [&str; 2] = ["forefoot", "heel"];

/// EMA momentum of the activation range observers.
pub const OBSERVER_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    HeUniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        Self { name: name.into(), shape, init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Trainable tensors of a configuration, in the order the forward passes
/// consume them.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let k = KERNEL;
    let he = |fan_in| Init::HeUniform { fan_in };
    let mut out = Vec::new();
    let head = |out: &mut Vec<ParamSpec>, name: &str, m: usize, n: usize| {
        out.push(ParamSpec::new(format!("{name}.weight"), vec![m, n], he(n)));
        out.push(ParamSpec::new(format!("{name}.bias"), vec![m], Init::Zeros));
    };
    let bn = |out: &mut Vec<ParamSpec>, name: &str, c: usize| {
        out.push(ParamSpec::new(format!("{name}.gamma"), vec![c], Init::Ones));
        out.push(ParamSpec::new(format!("{name}.beta"), vec![c], Init::Zeros));
    };
    match cfg.arch {
        Arch::Cnn1d | Arch::SepCnn1d => {
            let mut c_in = cfg.c_in;
            for (i, c_out) in channel_schedule(cfg.size())?.into_iter().enumerate() {
                let p = format!("block{}", i + 1);
                if cfg.arch == Arch::SepCnn1d {
                    out.push(ParamSpec::new(format!("{p}.dw.weight"), vec![c_in, k], he(k)));
                    out.push(ParamSpec::new(format!("{p}.dw.bias"), vec![c_in], Init::Zeros));
                    out.push(ParamSpec::new(format!("{p}.conv.weight"), vec![c_out, c_in, 1], he(c_in)));
                } else {
                    out.push(ParamSpec::new(format!("{p}.conv.weight"), vec![c_out, c_in, k], he(c_in * k)));
                }
                out.push(ParamSpec::new(format!("{p}.conv.bias"), vec![c_out], Init::Zeros));
                bn(&mut out, &format!("{p}.bn"), c_out);
                c_in = c_out;
            }
            let h = dense_hidden(c_in);
            head(&mut out, "hidden", h, c_in);
            head(&mut out, "out", cfg.classes, h);
        }
        Arch::Lstm => {
            let h = cfg.size();
            out.push(ParamSpec::new("lstm.w_ih", vec![4 * h, cfg.c_in], he(cfg.c_in)));
            out.push(ParamSpec::new("lstm.w_hh", vec![4 * h, h], he(h)));
            out.push(ParamSpec::new("lstm.bias", vec![4 * h], Init::Zeros));
            head(&mut out, "out", cfg.classes, h);
        }
        Arch::Transformer => {
            let d = cfg.size();
            let pointwise = |out: &mut Vec<ParamSpec>, name: &str, m: usize, n: usize| {
                out.push(ParamSpec::new(format!("{name}.weight"), vec![m, n, 1], he(n)));
                out.push(ParamSpec::new(format!("{name}.bias"), vec![m], Init::Zeros));
            };
            pointwise(&mut out, "proj", d, cfg.c_in);
            for name in ["q", "k", "v", "o"] {
                pointwise(&mut out, name, d, d);
            }
            bn(&mut out, "bn1", d);
            pointwise(&mut out, "ff1", 4 * d, d);
            pointwise(&mut out, "ff2", d, 4 * d);
            bn(&mut out, "bn2", d);
            head(&mut out, "out", cfg.classes, d);
        }
    }
    Ok(out)
}

/// Batch-norm layers of a configuration as `(name, channels)`.
pub fn bn_layers(cfg: &ModelConfig) -> Result<Vec<(String, usize)>> {
    cfg.validate()?;
    Ok(match cfg.arch {
        Arch::Cnn1d | Arch::SepCnn1d => channel_schedule(cfg.size())?
            .into_iter()
            .enumerate()
            .map(|(i, c)| (format!("block{}.bn", i + 1), c))
            .collect(),
        Arch::Lstm => Vec::new(),
        Arch::Transformer => vec![("bn1".into(), cfg.size()), ("bn2".into(), cfg.size())],
    })
}

/// Names of the activation quantization points, in forward order.
pub fn quant_points(cfg: &ModelConfig) -> Result<Vec<String>> {
    cfg.validate()?;
    let mut out = vec!["in".to_string()];
    match cfg.arch {
        Arch::Cnn1d | Arch::SepCnn1d => {
            for i in 1..=cfg.size() {
                if cfg.arch == Arch::SepCnn1d {
                    out.push(format!("block{i}.dw"));
                }
                out.push(format!("block{i}"));
            }
            out.extend(["gap", "hidden", "logits"].map(String::from));
        }
        Arch::Lstm => out.extend(["z", "c", "logits"].map(String::from)),
        Arch::Transformer => out.extend(
            ["e", "q", "k", "v", "s", "a", "o", "r1", "n1", "f1", "f2", "r2", "n2", "gap", "logits"].map(String::from),
        ),
    }
    Ok(out)
}

/// One row of the per-layer breakdown.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: String,
    pub output_shape: Vec<usize>,
    pub params: usize,
    pub macs: usize,
}

fn layer(name: impl Into<String>, kind: &str, shape: Vec<usize>, params: usize, macs: usize) -> LayerInfo {
    LayerInfo { name: name.into(), kind: kind.into(), output_shape: shape, params, macs }
}

/// Layer-by-layer shapes, parameters and MACs, enumerated independently of
/// the closed forms in [`param_count`] and [`mac_count`].
pub fn describe(cfg: &ModelConfig) -> Result<Vec<LayerInfo>> {
    cfg.validate()?;
    let (n, k, classes) = (cfg.n, KERNEL, cfg.classes);
    let mut out = Vec::new();
    match cfg.arch {
        Arch::Cnn1d | Arch::SepCnn1d => {
            let sched = channel_schedule(cfg.size())?;
            let mut c_in = cfg.c_in;
            let mut l = n;
            for (i, &c_out) in sched.iter().enumerate() {
                let p = format!("block{}", i + 1);
                if cfg.arch == Arch::SepCnn1d {
                    out.push(layer(
                        format!("{p}.dw"),
                        "depthwise_conv1d",
                        vec![c_in, l],
                        c_in * k + c_in,
                        c_in * k * l,
                    ));
                    out.push(layer(
                        format!("{p}.conv"),
                        "pointwise_conv1d",
                        vec![c_out, l],
                        c_in * c_out + c_out,
                        c_in * c_out * l,
                    ));
                } else {
                    out.push(layer(
                        format!("{p}.conv"),
                        "conv1d",
                        vec![c_out, l],
                        c_in * c_out * k + c_out,
                        c_in * c_out * k * l,
                    ));
                }
                out.push(layer(format!("{p}.bn"), "batchnorm1d", vec![c_out, l], 2 * c_out, 0));
                out.push(layer(format!("{p}.relu"), "relu", vec![c_out, l], 0, 0));
                if i + 1 < sched.len() {
                    l /= 2;
                    out.push(layer(format!("{p}.pool"), "maxpool1d", vec![c_out, l], 0, 0));
                }
                c_in = c_out;
            }
            let h = dense_hidden(c_in);
            out.push(layer("gap", "global_avg_pool", vec![c_in], 0, 0));
            out.push(layer("hidden", "dense", vec![h], c_in * h + h, c_in * h));
            out.push(layer("hidden.relu", "relu", vec![h], 0, 0));
            out.push(layer("out", "dense", vec![classes], h * classes + classes, h * classes));
        }
        Arch::Lstm => {
            let h = cfg.size();
            let per_step = 4 * h * (cfg.c_in + h) + 3 * h;
            out.push(layer("lstm", "lstm", vec![h], 4 * h * cfg.c_in + 4 * h * h + 4 * h, n * per_step));
            out.push(layer("out", "dense", vec![classes], h * classes + classes, h * classes));
        }
        Arch::Transformer => {
            let d = cfg.size();
            out.push(layer("proj", "pointwise_conv1d", vec![d, n], cfg.c_in * d + d, cfg.c_in * d * n));
            out.push(layer("pos", "positional_encoding", vec![d, n], 0, 0));
            for name in ["q", "k", "v"] {
                out.push(layer(name, "pointwise_conv1d", vec![d, n], d * d + d, d * d * n));
            }
            out.push(layer("scores", "attention_scores", vec![n, n], 0, n * n * d));
            out.push(layer("softmax", "softmax", vec![n, n], 0, 0));
            out.push(layer("mix", "attention_mix", vec![d, n], 0, n * n * d));
            out.push(layer("o", "pointwise_conv1d", vec![d, n], d * d + d, d * d * n));
            out.push(layer("bn1", "residual_batchnorm1d", vec![d, n], 2 * d, d * n));
            out.push(layer("ff1", "pointwise_conv1d", vec![4 * d, n], d * 4 * d + 4 * d, d * 4 * d * n));
            out.push(layer("ff1.relu", "relu", vec![4 * d, n], 0, 0));
            out.push(layer("ff2", "pointwise_conv1d", vec![d, n], 4 * d * d + d, 4 * d * d * n));
            out.push(layer("bn2", "residual_batchnorm1d", vec![d, n], 2 * d, d * n));
            out.push(layer("gap", "global_avg_pool", vec![d], 0, 0));
            out.push(layer("out", "dense", vec![classes], d * classes + classes, d * classes));
        }
    }
    Ok(out)
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub name: String,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

/// Activation range observers of a model being quantized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantState {
    pub bitwidth: u32,
    pub observers: BTreeMap<String, RangeObserver>,
}

impl QuantState {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let observers = quant_points(cfg)?.into_iter().map(|p| (p, RangeObserver::new(OBSERVER_MOMENTUM))).collect();
        Ok(Self { bitwidth: cfg.bitwidth, observers })
    }

    pub fn params(&self, point: &str) -> Result<QuantParams> {
        match self.observers.get(point) {
            Some(o) if !o.is_empty() => o.params(self.bitwidth),
            _ => Err(Error::MissingQuantParams(point.to_string())),
        }
    }

    pub fn is_calibrated(&self) -> bool {
        self.observers.values().all(|o| !o.is_empty())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// A float classifier with optional quantization state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<NamedTensor>,
    pub bn: Vec<BnStats>,
    #[serde(default)]
    pub quant: Option<QuantState>,
}

fn init_tensor(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor {
    let n = spec.numel();
    let data = match spec.init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::HeUniform { fan_in } => {
            let bound = (6.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        }
    };
    Tensor::from_parts(spec.shape.clone(), data)
}

impl Model {
    /// Builds a freshly initialized model; the seed fully determines the
    /// weights.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let specs = param_specs(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params =
            specs.iter().map(|s| NamedTensor { name: s.name.clone(), tensor: init_tensor(s, &mut rng) }).collect();
        let bn = bn_layers(&config)?
            .into_iter()
            .map(|(name, c)| BnStats {
                name,
                running_mean: Tensor::zeros(&[c]),
                running_var: Tensor::filled(&[c], 1.0),
            })
            .collect();
        Ok(Self { version: MODEL_VERSION, config, params, bn, quant: None })
    }

    /// Number of trainable scalars, counted over the built tensors.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    /// Sets every trainable tensor to `value`.
    pub fn fill_params(&mut self, value: f64) {
        for p in &mut self.params {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = value);
        }
    }

    /// Starts activation range tracking at the config's bitwidth, discarding
    /// any previous ranges.
    pub fn enable_quantization(&mut self) -> Result<()> {
        self.quant = Some(QuantState::new(&self.config)?);
        Ok(())
    }

    pub fn set_bitwidth(&mut self, bitwidth: u32) -> Result<()> {
        crate::quant::quant_range(bitwidth)?;
        self.config.bitwidth = bitwidth;
        if self.quant.is_some() {
            self.enable_quantization()?;
        }
        Ok(())
    }

    pub(crate) fn apply_bn_batches(&mut self, batches: &[BnBatch]) {
        for (stats, batch) in self.bn.iter_mut().zip(batches) {
            crate::tensor::ops::update_running_stats(
                &mut stats.running_mean,
                &mut stats.running_var,
                batch,
                crate::tensor::ops::BN_MOMENTUM,
            );
        }
    }

    /// Logits for a `[C, L]` input (`[K]` out) or a `[B, C, L]` batch
    /// (`[B, K]` out). Integer mode exports the quantized twin on every call;
    /// export once with [`Model::export_int`] for repeated inference.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Int => {
                let int = self.export_int()?;
                match x.rank() {
                    2 => int.forward(x),
                    3 => {
                        let per = x.len() / x.dim(0);
                        let mut rows = Vec::with_capacity(x.dim(0));
                        for s in x.data().chunks(per) {
                            let xs = Tensor::new(x.shape()[1..].to_vec(), s.to_vec())?;
                            rows.push(int.forward(&xs)?.into_data());
                        }
                        Tensor::from_rows(&rows)
                    }
                    _ => Err(Error::InvalidShape {
                        op: "forward",
                        shape: x.shape().to_vec(),
                        reason: "expected [C, L] or [B, C, L]",
                    }),
                }
            }
            _ => {
                let g = graph::build(self, None, x, mode, false)?;
                let logits = g.tape.value(g.logits).clone();
                if x.rank() == 2 {
                    logits.reshape(vec![self.config.classes])
                } else {
                    Ok(logits)
                }
            }
        }
    }

    /// Records a forward pass on a fresh tape. With `train`, float mode uses
    /// batch statistics and updates the running estimates, and fake-quant
    /// mode updates the activation range observers before using them.
    pub fn graph(&mut self, x: &Tensor, mode: Mode, train: bool) -> Result<Graph> {
        let g = if train && mode == Mode::FakeQuant {
            let mut quant = self.quant.take();
            let res = graph::build(self, quant.as_mut(), x, mode, train);
            self.quant = quant;
            res?
        } else {
            graph::build(self, None, x, mode, train)?
        };
        if train && mode == Mode::Float {
            self.apply_bn_batches(&g.bn_batches);
        }
        Ok(g)
    }

    /// Predicted class per sample of a `[B, C, L]` batch.
    pub fn predict(&self, x: &Tensor, mode: Mode) -> Result<Vec<usize>> {
        let logits = self.forward(x, mode)?;
        let k = self.config.classes;
        Ok(logits.data().chunks(k).map(argmax).collect())
    }

    /// Integer twin of the model; needs calibrated activation ranges.
    pub fn export_int(&self) -> Result<IntModel> {
        int::export(self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Model = serde_json::from_str(s)?;
        if m.version != MODEL_VERSION {
            return Err(Error::Config(format!("unsupported model version {}", m.version)));
        }
        let specs = param_specs(&m.config)?;
        if specs.len() != m.params.len()
            || specs.iter().zip(&m.params).any(|(s, p)| s.name != p.name || s.shape != p.tensor.shape())
        {
            return Err(Error::Config("parameters do not match the configuration".into()));
        }
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

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_configs() -> Vec<ModelConfig> {
        let mut out = Vec::new();
        for b in crate::quant::BITWIDTHS {
            for nb in 1..=5 {
                out.push(ModelConfig::cnn(nb, b));
                out.push(ModelConfig::sepcnn(nb, b));
            }
            for h in (8..=64).step_by(8) {
                out.push(ModelConfig::lstm(h, b));
            }
            for d in [8, 16, 24, 32] {
                out.push(ModelConfig::transformer(d, b));
            }
        }
        out
    }

    #[test]
    fn counts_agree_with_enumeration() {
        for cfg in all_configs() {
            let built = Model::build(cfg.clone(), 1).unwrap();
            let layers = describe(&cfg).unwrap();
            let p = param_count(&cfg).unwrap();
            assert_eq!(built.parameter_count(), p, "{}", cfg.label());
            assert_eq!(layers.iter().map(|l| l.params).sum::<usize>(), p, "{}", cfg.label());
            assert_eq!(layers.iter().map(|l| l.macs).sum::<usize>(), mac_count(&cfg).unwrap(), "{}", cfg.label());
        }
    }

    #[test]
    fn build_is_seeded() {
        let a = Model::build(ModelConfig::cnn(3, 8), 7).unwrap();
        let b = Model::build(ModelConfig::cnn(3, 8), 7).unwrap();
        let c = Model::build(ModelConfig::cnn(3, 8), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn json_round_trip() {
        let m = Model::build(ModelConfig::transformer(8, 4), 3).unwrap();
        let back = Model::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn lstm_head_width() {
        let m = Model::build(ModelConfig::lstm(24, 8), 0).unwrap();
        assert_eq!(m.param("out.weight").unwrap().shape(), &[2, 24]);
    }

    #[test]
    fn transformer_ffn_width() {
        let m = Model::build(ModelConfig::transformer(8, 8), 0).unwrap();
        assert_eq!(m.param("ff1.weight").unwrap().shape(), &[32, 8, 1]);
    }
}
