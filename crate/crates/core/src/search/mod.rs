//! Bi-objective configuration search: maximize validation F1, minimize
//! energy per inference.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::models::{Arch, ModelConfig, DEFAULT_N, MAX_BLOCKS};
use crate::train::{TrainConfig, BATCH_SIZES, LR_MAX, LR_MIN};

mod eval;
mod nsga;

pub use eval::{Evaluation, Evaluator, SyntheticEvaluator, TrainingEvaluator};
pub use nsga::{run_search, SearchOptions, SearchOutcome};

/// Learning-rate gene: continuous log-uniform or a fixed grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSpace {
    LogUniform { min: f64, max: f64 },
    Grid(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub arch: Arch,
    pub sizes: Vec<usize>,
    pub bitwidths: Vec<u32>,
    pub batch_sizes: Vec<usize>,
    pub lr: LrSpace,
}

impl SearchSpace {
    /// Full space for one architecture at the default input length.
    pub fn for_arch(arch: Arch) -> Self {
        let sizes = match arch {
            Arch::Cnn1d | Arch::SepCnn1d => (1..=MAX_BLOCKS).collect(),
            Arch::Lstm => (1..=8).map(|k| 8 * k).collect(),
            Arch::Transformer => vec![8, 16, 24, 32],
        };
        let mut s = Self {
            arch,
            sizes,
            bitwidths: vec![4, 6, 8],
            batch_sizes: BATCH_SIZES.to_vec(),
            lr: LrSpace::LogUniform { min: LR_MIN, max: LR_MAX },
        };
        s.sizes.retain(|&v| ModelConfig::with_size(arch, v, 8).with_n(DEFAULT_N).validate().is_ok());
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.bitwidths.is_empty() || self.batch_sizes.is_empty() {
            return Err(invalid("search space has an empty dimension"));
        }
        for &b in &self.bitwidths {
            crate::quant::quant_range(b)?;
        }
        for &s in &self.sizes {
            ModelConfig::with_size(self.arch, s, self.bitwidths[0]).validate()?;
        }
        match &self.lr {
            LrSpace::LogUniform { min, max } if !(*min > 0.0 && min <= max) => {
                Err(invalid(format!("bad learning-rate range [{min}, {max}]")))
            }
            LrSpace::Grid(g) if g.is_empty() || g.iter().any(|&v| !(v > 0.0)) => {
                Err(invalid("learning-rate grid must be nonempty and positive"))
            }
            _ => Ok(()),
        }
    }

    /// Number of distinct candidates, if the space is finite.
    pub fn discrete_size(&self) -> Option<usize> {
        let base = self.sizes.len() * self.bitwidths.len() * self.batch_sizes.len();
        match &self.lr {
            LrSpace::Grid(g) => Some(base * g.len()),
            LrSpace::LogUniform { .. } => None,
        }
    }

    /// Every candidate of a finite space, in a fixed order.
    pub fn enumerate(&self) -> Vec<Candidate> {
        let LrSpace::Grid(grid) = &self.lr else { return Vec::new() };
        let mut out = Vec::new();
        for &size in &self.sizes {
            for &bitwidth in &self.bitwidths {
                for &batch_size in &self.batch_sizes {
                    for &lr in grid {
                        out.push(Candidate { arch: self.arch, size, bitwidth, batch_size, lr });
                    }
                }
            }
        }
        out
    }
}

/// One point of the search space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub arch: Arch,
    pub size: usize,
    pub bitwidth: u32,
    pub batch_size: usize,
    pub lr: f64,
}

impl Candidate {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::with_size(self.arch, self.size, self.bitwidth)
    }

    pub fn train_config(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig { batch_size: self.batch_size, lr: self.lr, epochs, seed, ..TrainConfig::default() }
    }

    /// Identity for duplicate detection; learning rates compare by bits.
    pub(crate) fn key(&self) -> (Arch, usize, u32, usize, u64) {
        (self.arch, self.size, self.bitwidth, self.batch_size, self.lr.to_bits())
    }
}

/// One evaluated candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub generation: usize,
    pub config: Candidate,
    pub seed: u64,
    pub f1: f64,
    pub energy_uj: f64,
    pub deployable: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

/// `a` is at least as good in both objectives and strictly better in one.
pub fn dominates(a: &Trial, b: &Trial) -> bool {
    a.f1 >= b.f1 && a.energy_uj <= b.energy_uj && (a.f1 > b.f1 || a.energy_uj < b.energy_uj)
}

/// Crowding distance of each member of one front (same order as `front`).
pub fn crowding_distance(trials: &[Trial], front: &[usize]) -> Vec<f64> {
    let n = front.len();
    let mut dist = vec![0.0; n];
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let objectives: [fn(&Trial) -> f64; 2] = [|t| t.f1, |t| t.energy_uj];
    for obj in objectives {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| obj(&trials[front[a]]).total_cmp(&obj(&trials[front[b]])));
        let lo = obj(&trials[front[order[0]]]);
        let hi = obj(&trials[front[order[n - 1]]]);
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        if hi > lo {
            for w in 1..n - 1 {
                let gap = obj(&trials[front[order[w + 1]]]) - obj(&trials[front[order[w - 1]]]);
                dist[order[w]] += gap / (hi - lo);
            }
        }
    }
    dist
}

/// Fronts of increasing rank; each front is ordered by decreasing crowding
/// distance. Non-deployable trials form the last front.
pub fn nondominated_sort(trials: &[Trial]) -> Vec<Vec<usize>> {
    let ok: Vec<usize> = (0..trials.len()).filter(|&i| trials[i].deployable).collect();
    let mut dominated_by = vec![0usize; trials.len()];
    let mut dominates_list: Vec<Vec<usize>> = vec![Vec::new(); trials.len()];
    for (x, &i) in ok.iter().enumerate() {
        for &j in &ok[x + 1..] {
            if dominates(&trials[i], &trials[j]) {
                dominates_list[i].push(j);
                dominated_by[j] += 1;
            } else if dominates(&trials[j], &trials[i]) {
                dominates_list[j].push(i);
                dominated_by[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = ok.iter().copied().filter(|&i| dominated_by[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominates_list[i] {
                dominated_by[j] -= 1;
                if dominated_by[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(order_by_crowding(trials, current));
        current = next;
    }
    let bad: Vec<usize> = (0..trials.len()).filter(|&i| !trials[i].deployable).collect();
    if !bad.is_empty() {
        fronts.push(bad);
    }
    fronts
}

fn order_by_crowding(trials: &[Trial], front: Vec<usize>) -> Vec<usize> {
    let d = crowding_distance(trials, &front);
    let mut idx: Vec<usize> = (0..front.len()).collect();
    // stable: ties keep index order
    idx.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
    idx.into_iter().map(|k| front[k]).collect()
}

/// Deployable trials not dominated by any other deployable trial, in
/// archive order.
pub fn pareto_front(trials: &[Trial]) -> Vec<usize> {
    let ok: Vec<usize> = (0..trials.len()).filter(|&i| trials[i].deployable).collect();
    ok.iter().copied().filter(|&i| !ok.iter().any(|&j| dominates(&trials[j], &trials[i]))).collect()
}

pub fn write_archive(path: &Path, trials: &[Trial]) -> Result<()> {
    let mut s = String::new();
    for t in trials {
        s.push_str(&serde_json::to_string(t)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<Vec<Trial>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let t = serde_json::from_str(line).map_err(|e| crate::Error::Data {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", line_no + 1),
        })?;
        out.push(t);
    }
    Ok(out)
}

/// F1 against energy for every trial, one row each.
pub fn scatter_csv(trials: &[Trial]) -> String {
    let front = pareto_front(trials);
    let mut s = String::from("index,arch,size,bitwidth,batch_size,lr,f1,energy_uj,deployable,pareto\n");
    for (i, t) in trials.iter().enumerate() {
        let c = &t.config;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:e},{},{},{},{}",
            t.index,
            c.arch,
            c.size,
            c.bitwidth,
            c.batch_size,
            c.lr,
            t.f1,
            t.energy_uj,
            t.deployable,
            front.contains(&i)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(f1: f64, e: f64) -> Trial {
        Trial {
            index: 0,
            generation: 0,
            config: Candidate { arch: Arch::Cnn1d, size: 1, bitwidth: 8, batch_size: 16, lr: 1e-3 },
            seed: 0,
            f1,
            energy_uj: e,
            deployable: true,
            error: None,
        }
    }

    #[test]
    fn dominance_examples() {
        assert!(dominates(&t(0.9, 1.0), &t(0.8, 2.0)));
        assert!(!dominates(&t(0.9, 2.0), &t(0.8, 1.0)));
        assert!(!dominates(&t(0.8, 1.0), &t(0.9, 2.0)));
        assert!(!dominates(&t(0.9, 1.0), &t(0.9, 1.0)));
    }

    #[test]
    fn sort_examples() {
        assert_eq!(nondominated_sort(&[t(0.5, 1.0)]), vec![vec![0]]);
        let chain = [t(0.7, 3.0), t(0.9, 1.0), t(0.8, 2.0)];
        assert_eq!(nondominated_sort(&chain), vec![vec![1], vec![2], vec![0]]);
        let mut bad = t(1.0, 0.1);
        bad.deployable = false;
        assert_eq!(nondominated_sort(&[bad, t(0.2, 5.0)]), vec![vec![1], vec![0]]);
    }

    #[test]
    fn extremes_have_infinite_crowding() {
        let front = [t(0.9, 4.0), t(0.8, 3.0), t(0.6, 1.0), t(0.7, 2.5)];
        let d = crowding_distance(&front, &[0, 1, 2, 3]);
        assert!(d[0].is_infinite() && d[2].is_infinite());
        assert!(d[1].is_finite() && d[3].is_finite());
    }

    #[test]
    fn space_sizes() {
        let s = SearchSpace::for_arch(Arch::Cnn1d);
        assert_eq!(s.sizes, vec![1, 2, 3, 4, 5]);
        assert_eq!(SearchSpace::for_arch(Arch::Lstm).sizes.len(), 8);
        assert_eq!(s.discrete_size(), None);
        let g = SearchSpace { lr: LrSpace::Grid(vec![1e-4, 1e-3]), ..s };
        assert_eq!(g.discrete_size(), Some(5 * 3 * 5 * 2));
        assert_eq!(g.enumerate().len(), 150);
    }

    proptest! {
        #[test]
        fn first_front_matches_brute_force(points in prop::collection::vec((0.0f64..1.0, 0.0f64..10.0, any::<bool>()), 1..50)) {
            let trials: Vec<Trial> = points.iter().map(|&(f, e, ok)| Trial { deployable: ok || f > 0.5, ..t(f, e) }).collect();
            let fronts = nondominated_sort(&trials);
            let mut first = if trials[fronts[0][0]].deployable { fronts[0].clone() } else { Vec::new() };
            first.sort_unstable();
            prop_assert_eq!(first, pareto_front(&trials));
            // every trial appears exactly once
            let mut all: Vec<usize> = fronts.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..trials.len()).collect::<Vec<_>>());
        }
    }
}
