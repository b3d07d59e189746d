use serde::{Deserialize, Serialize};

use super::Candidate;
use crate::error::Result;
use crate::hwcost::CostModel;
use crate::models::{param_count, Mode};
use crate::train::{evaluate, two_step, WindowSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub f1: f64,
    pub energy_uj: f64,
    pub deployable: bool,
}

/// Scores one candidate. Must be deterministic in `(candidate, seed)`.
pub trait Evaluator: Sync {
    fn evaluate(&self, candidate: &Candidate, seed: u64) -> Result<Evaluation>;
}

/// Closed-form stand-in for training: F1 saturates with model capacity,
/// peaks near lr = 3e-4 and carries a small hash-derived jitter. Energy
/// and deployability come from the cost model.
pub struct SyntheticEvaluator {
    pub cost: CostModel,
}

impl SyntheticEvaluator {
    fn jitter(c: &Candidate) -> f64 {
        let (a, s, b, bs, lr) = c.key();
        let mut h = (a.index() as u64) << 56 ^ (s as u64) << 40 ^ u64::from(b) << 32 ^ (bs as u64) << 16 ^ lr;
        h ^= h >> 33;
        h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
        h ^= h >> 33;
        (h % 10_000) as f64 / 10_000.0
    }
}

impl Evaluator for SyntheticEvaluator {
    fn evaluate(&self, c: &Candidate, _seed: u64) -> Result<Evaluation> {
        let cfg = c.model_config();
        let report = self.cost.cost(&cfg)?;
        let capacity = param_count(&cfg)? as f64 * f64::from(c.bitwidth) / 2000.0;
        let lr_penalty = 0.05 * (c.lr.log10() - 3e-4f64.log10()).abs();
        let f1 = 0.6 + 0.35 * (1.0 - (-capacity).exp()) - lr_penalty + 0.03 * Self::jitter(c);
        Ok(Evaluation { f1: f1.clamp(0.0, 1.0), energy_uj: report.energy_uj, deployable: report.deployable })
    }
}

/// Runs the two-step pipeline for each candidate and scores the
/// fine-tuned model by its fake-quantized validation F1.
pub struct TrainingEvaluator {
    pub set: WindowSet,
    pub subject: String,
    pub cost: CostModel,
    pub epochs: usize,
    pub patience: usize,
    /// Independent retrains averaged per candidate.
    pub repeats: usize,
}

impl Evaluator for TrainingEvaluator {
    fn evaluate(&self, c: &Candidate, seed: u64) -> Result<Evaluation> {
        let cfg = c.model_config();
        let report = self.cost.cost(&cfg)?;
        if !report.deployable {
            // no point training what cannot be placed on the device
            return Ok(Evaluation { f1: 0.0, energy_uj: report.energy_uj, deployable: false });
        }
        let repeats = self.repeats.max(1);
        let mut total = 0.0;
        for r in 0..repeats {
            let mut tc = c.train_config(self.epochs, seed.wrapping_add(r as u64));
            tc.patience = self.patience;
            let out = two_step(&cfg, &self.set, &self.subject, &tc, &tc)?;
            total += evaluate(&out.model, &self.set, &out.split.val, Mode::FakeQuant)?;
        }
        Ok(Evaluation { f1: total / repeats as f64, energy_uj: report.energy_uj, deployable: true })
    }
}
