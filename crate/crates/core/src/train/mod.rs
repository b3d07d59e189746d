//! Optimization loop, F1 metric and the two-step strategy: generalized
//! training on every other participant, then quantization-aware
//! fine-tuning on the target subject.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::models::{IntModel, Mode, Model, ModelConfig, HEEL};
use crate::tensor::Tensor;

mod data;

pub use data::{
    split_participant, split_sizes, split_windows, Split, SplitRatios, WindowMeta, WindowSet, MIN_SPLIT_WINDOWS,
};

pub const BATCH_SIZES: [usize; 5] = [16, 24, 32, 40, 48];
pub const LR_MIN: f64 = 1e-5;
pub const LR_MAX: f64 = 1e-3;
pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
const ADAM_EPS: f64 = 1e-8;
/// Windows per forward pass when only predictions are needed.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Upper bound on epochs; zero only calibrates in QAT fine-tuning.
    pub epochs: usize,
    /// Epochs without a validation F1 improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 32, lr: 1e-3, epochs: 200, patience: 10, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !BATCH_SIZES.contains(&self.batch_size) {
            return Err(invalid(format!("batch size {} is not one of {BATCH_SIZES:?}", self.batch_size)));
        }
        if !(LR_MIN..=LR_MAX).contains(&self.lr) {
            return Err(invalid(format!("learning rate {} is outside [{LR_MIN}, {LR_MAX}]", self.lr)));
        }
        if self.patience == 0 {
            return Err(invalid("patience must be positive"));
        }
        Ok(())
    }
}

/// Binary confusion counts for one positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn new(preds: &[usize], labels: &[usize], positive: usize) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::ShapeMismatch { op: "f1_score", dim: "len", expected: labels.len(), got: preds.len() });
        }
        let mut c = Confusion::default();
        for (&p, &y) in preds.iter().zip(labels) {
            match (p == positive, y == positive) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    /// `2 TP / (2 TP + FP + FN)`, defined as 0 without true positives.
    pub fn f1(&self) -> f64 {
        if self.tp == 0 {
            return 0.0;
        }
        2.0 * self.tp as f64 / (2 * self.tp + self.fp + self.fn_) as f64
    }
}

pub fn f1_score(preds: &[usize], labels: &[usize], positive: usize) -> Result<f64> {
    if preds.is_empty() {
        return Err(invalid("F1 of an empty prediction set"));
    }
    Ok(Confusion::new(preds, labels, positive)?.f1())
}

/// Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { lr, t: 0, m, v }
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, grads: &[Tensor]) {
        let (b1, b2) = ADAM_BETAS;
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (k, p) in params.into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &g)) in p.data_mut().iter_mut().zip(grads[k].data()).enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub best_epoch: Option<usize>,
    pub best_val_f1: f64,
    pub log: Vec<EpochLog>,
}

/// Class predictions for a subset of windows.
pub fn predict(model: &Model, set: &WindowSet, idx: &[usize], mode: Mode) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(idx.len());
    match mode {
        Mode::Int => {
            let int = model.export_int()?;
            out.extend(predict_int(&int, set, idx)?);
        }
        _ => {
            for chunk in idx.chunks(EVAL_CHUNK) {
                out.extend(model.predict(&set.batch(chunk), mode)?);
            }
        }
    }
    Ok(out)
}

pub fn predict_int(int: &IntModel, set: &WindowSet, idx: &[usize]) -> Result<Vec<usize>> {
    idx.iter().map(|&i| int.predict(&set.window(i))).collect()
}

/// Heel-class F1 over a subset of windows.
pub fn evaluate(model: &Model, set: &WindowSet, idx: &[usize], mode: Mode) -> Result<f64> {
    f1_score(&predict(model, set, idx, mode)?, &set.labels(idx), HEEL)
}

/// Minibatch training with early stopping on validation F1; the model is
/// left at its best-validation weights.
///
/// `mode` is `Float` or `FakeQuant`. Trailing batches of a single window
/// are skipped because batch statistics need two samples.
pub fn fit(
    model: &mut Model,
    set: &WindowSet,
    split: &Split,
    cfg: &TrainConfig,
    mode: Mode,
    phase: &str,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if mode == Mode::Int {
        return Err(invalid("integer models are not trainable"));
    }
    if split.train.is_empty() || split.val.is_empty() {
        return Err(invalid("training needs nonempty train and validation sets"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr, model.params.iter().map(|p| p.tensor.len()));
    let mut order = split.train.clone();
    let mut outcome = FitOutcome::default();
    let mut best: Option<Model> = None;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        let clock = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut seen = 0;
        for batch in order.chunks(cfg.batch_size).filter(|b| b.len() > 1) {
            let g = model.graph(&set.batch(batch), mode, true)?;
            let mut tape = g.tape;
            let loss = tape.cross_entropy(g.logits, &set.labels(batch))?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged(format!("{phase} epoch {epoch}: loss is {lv}")));
            }
            let mut grads = tape.backward(loss)?;
            let gs: Vec<Tensor> = g.params.iter().map(|&v| grads.take(v)).collect();
            adam.step(model.params.iter_mut().map(|p| &mut p.tensor), &gs);
            total += lv * batch.len() as f64;
            seen += batch.len();
        }
        let val_f1 = evaluate(model, set, &split.val, mode)?;
        outcome.log.push(EpochLog {
            phase: phase.to_string(),
            epoch,
            train_loss: total / seen.max(1) as f64,
            val_f1,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
        });
        if best.is_none() || val_f1 > outcome.best_val_f1 {
            outcome.best_val_f1 = val_f1;
            outcome.best_epoch = Some(epoch);
            best = Some(model.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    if let Some(b) = best {
        *model = b;
    }
    Ok(outcome)
}

/// Observes activation ranges on the given windows without touching the
/// weights. Enables quantization first if needed.
pub fn calibrate(model: &mut Model, set: &WindowSet, idx: &[usize], batch_size: usize) -> Result<()> {
    if idx.is_empty() {
        return Err(invalid("calibration needs at least one window"));
    }
    if model.quant.is_none() {
        model.enable_quantization()?;
    }
    for chunk in idx.chunks(batch_size.max(1)) {
        model.graph(&set.batch(chunk), Mode::FakeQuant, true)?;
    }
    Ok(())
}

/// Train/validation indices of every participant except `held_out`.
pub fn generalized_split(set: &WindowSet, held_out: &str, ratios: &SplitRatios) -> Result<Split> {
    let ids = set.participants();
    if !ids.iter().any(|p| p == held_out) {
        return Err(Error::InvalidArgument(format!("unknown participant `{held_out}`")));
    }
    if ids.len() < 2 {
        return Err(invalid("generalized training needs at least two participants"));
    }
    let mut split = Split::default();
    for p in ids.iter().filter(|p| *p != held_out) {
        let s = split_participant(set, p, ratios)?;
        split.train.extend(s.train);
        split.val.extend(s.val);
    }
    Ok(split)
}

/// Float training on every participant except `held_out`.
pub fn train_generalized(
    config: &ModelConfig,
    set: &WindowSet,
    held_out: &str,
    cfg: &TrainConfig,
) -> Result<(Model, FitOutcome)> {
    let split = generalized_split(set, held_out, &SplitRatios::default())?;
    let mut model = Model::build(config.clone(), cfg.seed)?;
    let outcome = fit(&mut model, set, &split, cfg, Mode::Float, "generalized")?;
    Ok((model, outcome))
}

/// Quantization-aware fine-tuning on one subject's training block at the
/// model's configured bitwidth. Activation ranges are calibrated first,
/// so zero epochs leaves the weights untouched.
pub fn finetune_qat(model: &Model, set: &WindowSet, split: &Split, cfg: &TrainConfig) -> Result<(Model, FitOutcome)> {
    cfg.validate()?;
    let mut m = model.clone();
    m.set_bitwidth(m.config.bitwidth)?;
    m.enable_quantization()?;
    calibrate(&mut m, set, &split.train, cfg.batch_size)?;
    let outcome = if cfg.epochs == 0 {
        FitOutcome::default()
    } else {
        fit(&mut m, set, split, cfg, Mode::FakeQuant, "finetune")?
    };
    Ok((m, outcome))
}

/// Result of the full two-step pipeline for one subject.
#[derive(Clone, Debug)]
pub struct StudyOutcome {
    pub model: Model,
    pub int_model: IntModel,
    pub split: Split,
    pub generalized: FitOutcome,
    pub finetune: FitOutcome,
    pub test_f1_float: f64,
    pub test_f1_fake: f64,
    pub test_f1_int: f64,
    /// Test windows where the integer and fake-quantized predictions agree.
    pub agreement: usize,
}

/// Generalized pre-training without `subject`, fine-tuning on `subject`'s
/// training block, integer export and test-block evaluation.
pub fn two_step(
    config: &ModelConfig,
    set: &WindowSet,
    subject: &str,
    general: &TrainConfig,
    finetune: &TrainConfig,
) -> Result<StudyOutcome> {
    let (pre, generalized) = train_generalized(config, set, subject, general)?;
    let split = split_participant(set, subject, &SplitRatios::default())?;
    let test_f1_float = evaluate(&pre, set, &split.test, Mode::Float)?;
    let (model, ft) = finetune_qat(&pre, set, &split, finetune)?;
    let int_model = model.export_int()?;
    let fake = predict(&model, set, &split.test, Mode::FakeQuant)?;
    let int = predict_int(&int_model, set, &split.test)?;
    let labels = set.labels(&split.test);
    Ok(StudyOutcome {
        test_f1_float,
        test_f1_fake: f1_score(&fake, &labels, HEEL)?,
        test_f1_int: f1_score(&int, &labels, HEEL)?,
        agreement: fake.iter().zip(&int).filter(|(a, b)| a == b).count(),
        model,
        int_model,
        split,
        generalized,
        finetune: ft,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_examples() {
        assert_eq!(f1_score(&[1, 0, 1], &[1, 0, 1], 1).unwrap(), 1.0);
        assert_eq!(f1_score(&[0, 1, 0], &[1, 0, 1], 1).unwrap(), 0.0);
        // tp 4, fp 1, fn 1
        let p = [1, 1, 1, 1, 1, 0, 0];
        let y = [1, 1, 1, 1, 0, 1, 0];
        assert!((f1_score(&p, &y, 1).unwrap() - 0.8).abs() < 1e-15);
        assert!(f1_score(&[], &[], 1).is_err());
        assert!(f1_score(&[1], &[1, 0], 1).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = [Tensor::from_vec(vec![1.0, -2.0, 0.5])];
        let g = vec![Tensor::from_vec(vec![0.3, -4.0, 0.0])];
        let mut adam = Adam::new(0.01, [3]);
        adam.step(p.iter_mut(), &g);
        let d = p[0].data();
        assert!((d[0] - 0.99).abs() < 1e-9);
        assert!((d[1] + 1.99).abs() < 1e-9);
        assert_eq!(d[2], 0.5);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = [Tensor::from_vec(vec![3.0, -1.5])];
        let mut adam = Adam::new(0.05, [2]);
        for _ in 0..2000 {
            let g = vec![p[0].map(|w| 2.0 * (w - 0.25))];
            adam.step(p.iter_mut(), &g);
        }
        assert!(p[0].data().iter().all(|w| (w - 0.25).abs() < 1e-3));
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 20, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: 2e-3, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: 1e-5, ..Default::default() }.validate().is_ok());
    }
}
