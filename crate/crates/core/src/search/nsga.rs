use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{nondominated_sort, pareto_front, Candidate, Evaluator, LrSpace, SearchSpace, Trial};
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub budget: usize,
    pub population: usize,
    pub mutation: f64,
    /// Standard deviation of the learning-rate mutation in decades.
    pub lr_sigma: f64,
    pub seed: u64,
    /// Run the genetic loop even when exhaustive evaluation fits the budget.
    pub force_ga: bool,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self { budget: 200, population: 20, mutation: 0.2, lr_sigma: 0.25, seed: 0, force_ga: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub archive: Vec<Trial>,
    /// Archive indices of the deployable non-dominated trials.
    pub front: Vec<usize>,
    pub exhaustive: bool,
}

impl SearchOutcome {
    pub fn front_trials(&self) -> Vec<Trial> {
        self.front.iter().map(|&i| self.archive[i].clone()).collect()
    }
}

/// splitmix64 of the master seed and trial index.
fn trial_seed(master: u64, index: usize) -> u64 {
    let mut z = master ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn evaluate_batch<E: Evaluator>(
    evaluator: &E,
    candidates: Vec<Candidate>,
    first_index: usize,
    generation: usize,
    master: u64,
) -> Vec<Trial> {
    candidates
        .into_par_iter()
        .enumerate()
        .map(|(k, config)| {
            let index = first_index + k;
            let seed = trial_seed(master, index);
            match evaluator.evaluate(&config, seed) {
                Ok(e) if e.f1.is_finite() && e.energy_uj.is_finite() => Trial {
                    index,
                    generation,
                    config,
                    seed,
                    f1: e.f1,
                    energy_uj: e.energy_uj,
                    deployable: e.deployable,
                    error: None,
                },
                Ok(e) => failed(
                    index,
                    generation,
                    config,
                    seed,
                    format!("non-finite objectives ({}, {})", e.f1, e.energy_uj),
                ),
                Err(err) => failed(index, generation, config, seed, err.to_string()),
            }
        })
        .collect()
}

fn failed(index: usize, generation: usize, config: Candidate, seed: u64, error: String) -> Trial {
    Trial { index, generation, config, seed, f1: 0.0, energy_uj: 0.0, deployable: false, error: Some(error) }
}

struct Sampler<'a> {
    space: &'a SearchSpace,
    opts: &'a SearchOptions,
    rng: ChaCha8Rng,
}

impl Sampler<'_> {
    fn pick<T: Copy>(&mut self, v: &[T]) -> T {
        v[self.rng.random_range(0..v.len())]
    }

    fn random_lr(&mut self) -> f64 {
        match &self.space.lr {
            LrSpace::LogUniform { min, max } => 10f64.powf(self.rng.random_range(min.log10()..=max.log10())),
            LrSpace::Grid(g) => g[self.rng.random_range(0..g.len())],
        }
    }

    fn random(&mut self) -> Candidate {
        Candidate {
            arch: self.space.arch,
            size: self.pick(&self.space.sizes),
            bitwidth: self.pick(&self.space.bitwidths),
            batch_size: self.pick(&self.space.batch_sizes),
            lr: self.random_lr(),
        }
    }

    fn crossover(&mut self, a: &Candidate, b: &Candidate) -> Candidate {
        let mut c = *a;
        if self.rng.random_bool(0.5) {
            c.size = b.size;
        }
        if self.rng.random_bool(0.5) {
            c.bitwidth = b.bitwidth;
        }
        if self.rng.random_bool(0.5) {
            c.batch_size = b.batch_size;
        }
        if self.rng.random_bool(0.5) {
            c.lr = b.lr;
        }
        c
    }

    fn mutate(&mut self, c: &mut Candidate) {
        let p = self.opts.mutation;
        if self.rng.random_bool(p) {
            c.size = self.pick(&self.space.sizes);
        }
        if self.rng.random_bool(p) {
            c.bitwidth = self.pick(&self.space.bitwidths);
        }
        if self.rng.random_bool(p) {
            c.batch_size = self.pick(&self.space.batch_sizes);
        }
        if self.rng.random_bool(p) {
            c.lr = match &self.space.lr {
                LrSpace::LogUniform { min, max } => {
                    let step = Normal::new(0.0, self.opts.lr_sigma).expect("sigma validated").sample(&mut self.rng);
                    10f64.powf((c.lr.log10() + step).clamp(min.log10(), max.log10()))
                }
                LrSpace::Grid(g) => g[self.rng.random_range(0..g.len())],
            };
        }
    }
}

/// Binary tournament on (rank, crowding order).
fn tournament(rng: &mut ChaCha8Rng, order: &[usize]) -> usize {
    let a = rng.random_range(0..order.len());
    let b = rng.random_range(0..order.len());
    order[a.min(b)]
}

/// Trials of `pool` ranked by front, then crowding within the front.
fn ranked(pool: &[Trial]) -> Vec<usize> {
    nondominated_sort(pool).concat()
}

/// NSGA-II over `space`, archiving every evaluation.
///
/// When the space is finite and no larger than the budget (and `force_ga`
/// is off) every candidate is evaluated once instead. Duplicates are
/// never evaluated twice, so a finite space may end the search early.
pub fn run_search<E: Evaluator>(space: &SearchSpace, evaluator: &E, opts: &SearchOptions) -> Result<SearchOutcome> {
    space.validate()?;
    if opts.population < 2 {
        return Err(invalid("population must be at least 2"));
    }
    if opts.budget < opts.population {
        return Err(invalid(format!("budget {} is smaller than the population {}", opts.budget, opts.population)));
    }
    if !(0.0..=1.0).contains(&opts.mutation) || !(opts.lr_sigma > 0.0) {
        return Err(invalid("mutation probability must lie in [0, 1] and lr_sigma be positive"));
    }
    if let Some(n) = space.discrete_size() {
        if n <= opts.budget && !opts.force_ga {
            let archive = evaluate_batch(evaluator, space.enumerate(), 0, 0, opts.seed);
            let front = pareto_front(&archive);
            return Ok(SearchOutcome { archive, front, exhaustive: true });
        }
    }

    let mut s = Sampler { space, opts, rng: ChaCha8Rng::seed_from_u64(opts.seed) };
    let mut seen = HashSet::new();
    let unseen_pool = |seen: &HashSet<_>| -> Vec<Candidate> {
        space.enumerate().into_iter().filter(|c| !seen.contains(&c.key())).collect()
    };

    let mut initial = Vec::new();
    for _ in 0..opts.population * 50 {
        if initial.len() == opts.population {
            break;
        }
        let c = s.random();
        if seen.insert(c.key()) {
            initial.push(c);
        }
    }
    let mut archive = evaluate_batch(evaluator, initial, 0, 0, opts.seed);
    let mut population: Vec<Trial> = archive.clone();
    let mut generation = 0;

    while archive.len() < opts.budget {
        generation += 1;
        let want = opts.population.min(opts.budget - archive.len());
        let order = ranked(&population);
        let mut offspring = Vec::with_capacity(want);
        let mut attempts = 0;
        while offspring.len() < want && attempts < want * 50 {
            attempts += 1;
            let a = population[tournament(&mut s.rng, &order)].config;
            let b = population[tournament(&mut s.rng, &order)].config;
            let mut child = s.crossover(&a, &b);
            s.mutate(&mut child);
            if seen.insert(child.key()) {
                offspring.push(child);
            }
        }
        if offspring.len() < want && space.discrete_size().is_some() {
            // crowded finite space: fill from what is left, in random order
            let mut pool = unseen_pool(&seen);
            while offspring.len() < want && !pool.is_empty() {
                let c = pool.swap_remove(s.rng.random_range(0..pool.len()));
                seen.insert(c.key());
                offspring.push(c);
            }
        }
        if offspring.is_empty() {
            break;
        }
        let children = evaluate_batch(evaluator, offspring, archive.len(), generation, opts.seed);
        archive.extend(children.iter().cloned());

        population.extend(children);
        let keep: Vec<usize> = ranked(&population).into_iter().take(opts.population).collect();
        population = keep.into_iter().map(|i| population[i].clone()).collect();
    }
    let front = pareto_front(&archive);
    Ok(SearchOutcome { archive, front, exhaustive: false })
}
