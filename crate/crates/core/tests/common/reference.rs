//! Oracles shared by the integration tests and the acceptance run.

#![allow(dead_code)]

use footstrike::models::{Mode, Model, ModelConfig};
use footstrike::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Brute-force trigger: an event fires at step `i` when the run of target
/// predictions since the previous event reaches `n` and the cooldown has
/// elapsed since that event. Returns event step indices.
pub fn reference_trigger(preds: &[usize], times: &[f64], target: usize, n: usize, cooldown: f64) -> Vec<usize> {
    let mut events: Vec<usize> = Vec::new();
    for i in 0..preds.len() {
        let floor = events.last().map_or(0, |&e| e + 1);
        let run = preds[floor..=i].iter().rev().take_while(|&&p| p == target).count();
        let cooled = events.last().is_none_or(|&e| times[i] - times[e] >= cooldown);
        if run >= n && cooled {
            events.push(i);
        }
    }
    events
}

pub fn random_batch(rng: &mut ChaCha8Rng, b: usize, c: usize, n: usize) -> Tensor {
    let data = (0..b * c * n).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::new(vec![b, c, n], data).unwrap()
}

/// Random weights, perturbed running statistics and ranges observed on one
/// random batch.
pub fn calibrated(cfg: ModelConfig, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut m = Model::build(cfg.clone(), seed).unwrap();
    for p in &mut m.params {
        for v in p.tensor.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    for bn in &mut m.bn {
        for v in bn.running_mean.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        for v in bn.running_var.data_mut() {
            *v = rng.random_range(0.3..2.0);
        }
    }
    m.enable_quantization().unwrap();
    let x = random_batch(&mut rng, 16, cfg.c_in, cfg.n);
    m.graph(&x, Mode::FakeQuant, true).unwrap();
    m
}

/// Row `i` of a `[b, c, n]` batch as a `[c, n]` tensor.
pub fn sample(x: &Tensor, i: usize) -> Tensor {
    let (c, n) = (x.shape()[1], x.shape()[2]);
    Tensor::new(vec![c, n], x.data()[i * c * n..(i + 1) * c * n].to_vec()).unwrap()
}
