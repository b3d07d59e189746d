//! Central finite-difference checks of every differentiable tape op.
//!
//! Each case draws random inputs, builds a scalar `sum(c * op(inputs))`
//! with random coefficients `c`, and compares the tape gradient of every
//! input element against `(L(x + h) - L(x - h)) / 2h`. Inputs are redrawn
//! until every guarded value sits at least `KINK_MARGIN` away from the
//! nondifferentiable points of the hard activations and max pooling.

#![allow(dead_code)]

use footstrike::tensor::ops::BN_EPS;
use footstrike::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const KINK_MARGIN: f64 = 1e-2;
/// Relative errors use `max(|analytic|, |numeric|, REL_FLOOR)` as the
/// denominator so that vanishing gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-2;
pub const TOLERANCE: f64 = 1e-4;

pub enum Guard {
    /// Values of the var must avoid these points.
    Kinks(Var, &'static [f64]),
    /// Adjacent pairs along the last axis must not tie.
    PairGap(Var),
}

pub struct Built {
    pub out: Var,
    pub guards: Vec<Guard>,
}

impl Built {
    fn plain(out: Var) -> Self {
        Self { out, guards: Vec::new() }
    }
}

pub type Build = fn(&mut Tape, &[Var]) -> Result<Built>;

pub struct Case {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Build,
}

fn guards_hold(tape: &Tape, guards: &[Guard]) -> bool {
    guards.iter().all(|g| match g {
        Guard::Kinks(v, kinks) => {
            tape.value(*v).data().iter().all(|x| kinks.iter().all(|k| (x - k).abs() >= KINK_MARGIN))
        }
        Guard::PairGap(v) => {
            let t = tape.value(*v);
            let l = *t.shape().last().unwrap();
            t.data().chunks(l).all(|row| row.chunks_exact(2).all(|p| (p[0] - p[1]).abs() >= KINK_MARGIN))
        }
    })
}

fn loss_of(case: &Case, inputs: &[Tensor], coeff: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let built = (case.build)(&mut tape, &leaves)?;
    let y = tape.value(built.out);
    Ok(y.data().iter().zip(coeff.data()).map(|(a, b)| a * b).sum())
}

/// Largest relative error over all input elements for one seed.
pub fn check(case: &Case, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _attempt in 0..500 {
        let inputs: Vec<Tensor> = case
            .shapes
            .iter()
            .map(|s| {
                let n = s.iter().product();
                Tensor::new(s.clone(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
            })
            .collect();
        let mut tape = Tape::new();
        let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let built = (case.build)(&mut tape, &leaves)?;
        if !guards_hold(&tape, &built.guards) {
            continue;
        }
        let out_shape = tape.value(built.out).shape().to_vec();
        let n_out = out_shape.iter().product();
        let coeff = Tensor::new(out_shape, (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let weighted = tape.mul_const(built.out, coeff.clone())?;
        let loss = tape.sum(weighted);
        let grads = tape.backward(loss)?;

        let mut worst: f64 = 0.0;
        for (i, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(*leaf);
            for j in 0..inputs[i].len() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += STEP;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= STEP;
                let numeric = (loss_of(case, &plus, &coeff)? - loss_of(case, &minus, &coeff)?) / (2.0 * STEP);
                let a = analytic.data()[j];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
                worst = worst.max(err);
            }
        }
        return Ok(worst);
    }
    panic!("{}: no kink-free draw in 500 attempts", case.name);
}

const SIGMOID_KINKS: &[f64] = &[-2.0, 2.0];
const TANH_KINKS: &[f64] = &[-1.0, 1.0];
const RELU_KINKS: &[f64] = &[0.0];

fn lstm_unrolled(t: &mut Tape, v: &[Var]) -> Result<Built> {
    let (x, w_ih, w_hh, bias) = (v[0], v[1], v[2], v[3]);
    let b = t.value(x).dim(0);
    let steps = t.value(x).dim(2);
    let hs = t.value(w_hh).dim(1);
    let mut h = t.leaf(Tensor::zeros(&[b, hs]));
    let mut c = t.leaf(Tensor::zeros(&[b, hs]));
    let mut guards = Vec::new();
    for step in 0..steps {
        let xt = t.time_step(x, step)?;
        let zx = t.dense(xt, w_ih, Some(bias))?;
        let zh = t.dense(h, w_hh, None)?;
        let z = t.add(zx, zh)?;
        let mut gates = Vec::new();
        for k in 0..4 {
            let pre = t.slice_last(z, k * hs, hs)?;
            if k == 2 {
                guards.push(Guard::Kinks(pre, TANH_KINKS));
                gates.push(t.hardtanh(pre));
            } else {
                guards.push(Guard::Kinks(pre, SIGMOID_KINKS));
                gates.push(t.hardsigmoid(pre));
            }
        }
        let fc = t.mul(gates[1], c)?;
        let ig = t.mul(gates[0], gates[2])?;
        c = t.add(fc, ig)?;
        guards.push(Guard::Kinks(c, TANH_KINKS));
        let tc = t.hardtanh(c);
        h = t.mul(gates[3], tc)?;
    }
    Ok(Built { out: h, guards })
}

fn attention_block(t: &mut Tape, v: &[Var]) -> Result<Built> {
    let x = v[0];
    let d = t.value(x).dim(1);
    let q = t.conv1d(x, v[1], Some(v[2]))?;
    let k = t.conv1d(x, v[3], Some(v[4]))?;
    let val = t.conv1d(x, v[5], Some(v[6]))?;
    let s = t.attention_scores(q, k, 1.0 / (d as f64).sqrt())?;
    let p = t.softmax(s);
    let a = t.attention_mix(p, val)?;
    Ok(Built::plain(t.conv1d(a, v[7], Some(v[8]))?))
}

fn folded_conv(t: &mut Tape, v: &[Var]) -> Result<Built> {
    let (x, w, bias, gamma, beta) = (v[0], v[1], v[2], v[3], v[4]);
    let var = Tensor::from_vec(vec![0.5, 1.3, 2.0]);
    let mean = Tensor::from_vec(vec![0.1, -0.4, 0.7]);
    let s = t.bn_fold_scale(gamma, &var, BN_EPS)?;
    let wf = t.scale_rows(w, s)?;
    let bf = t.fold_bias(Some(bias), s, beta, &mean)?;
    Ok(Built::plain(t.conv1d(x, wf, Some(bf))?))
}

/// Every differentiable op, alone or in the compositions the models use.
pub fn cases() -> Vec<Case> {
    fn s(d: &[usize]) -> Vec<usize> {
        d.to_vec()
    }
    vec![
        Case {
            name: "conv1d",
            shapes: vec![s(&[3, 10]), s(&[4, 3, 3]), s(&[4])],
            build: |t, v| Ok(Built::plain(t.conv1d(v[0], v[1], Some(v[2]))?)),
        },
        Case {
            name: "conv1d_batched_pointwise",
            shapes: vec![s(&[2, 3, 6]), s(&[2, 3, 1])],
            build: |t, v| Ok(Built::plain(t.conv1d(v[0], v[1], None)?)),
        },
        Case {
            name: "depthwise_conv1d",
            shapes: vec![s(&[2, 3, 7]), s(&[3, 3]), s(&[3])],
            build: |t, v| Ok(Built::plain(t.depthwise_conv1d(v[0], v[1], Some(v[2]))?)),
        },
        Case {
            name: "maxpool1d",
            shapes: vec![s(&[2, 3, 7])],
            build: |t, v| Ok(Built { out: t.maxpool1d(v[0])?, guards: vec![Guard::PairGap(v[0])] }),
        },
        Case {
            name: "global_avg_pool",
            shapes: vec![s(&[2, 3, 5])],
            build: |t, v| Ok(Built::plain(t.global_avg_pool(v[0])?)),
        },
        Case {
            name: "dense",
            shapes: vec![s(&[3, 4]), s(&[5, 4]), s(&[5])],
            build: |t, v| Ok(Built::plain(t.dense(v[0], v[1], Some(v[2]))?)),
        },
        Case {
            name: "batchnorm_train",
            shapes: vec![s(&[4, 3, 5]), s(&[3]), s(&[3])],
            build: |t, v| Ok(Built::plain(t.batchnorm_train(v[0], v[1], v[2], BN_EPS)?.0)),
        },
        Case {
            name: "relu",
            shapes: vec![s(&[3, 6])],
            build: |t, v| Ok(Built { out: t.relu(v[0]), guards: vec![Guard::Kinks(v[0], RELU_KINKS)] }),
        },
        Case {
            name: "hardsigmoid",
            shapes: vec![s(&[3, 6])],
            build: |t, v| {
                let x = t.affine(v[0], 2.0, 0.0);
                Ok(Built { out: t.hardsigmoid(x), guards: vec![Guard::Kinks(x, SIGMOID_KINKS)] })
            },
        },
        Case {
            name: "hardtanh",
            shapes: vec![s(&[3, 6])],
            build: |t, v| Ok(Built { out: t.hardtanh(v[0]), guards: vec![Guard::Kinks(v[0], TANH_KINKS)] }),
        },
        Case {
            name: "add_broadcast",
            shapes: vec![s(&[2, 3, 4]), s(&[3, 4])],
            build: |t, v| Ok(Built::plain(t.add(v[0], v[1])?)),
        },
        Case { name: "mul", shapes: vec![s(&[2, 5]), s(&[2, 5])], build: |t, v| Ok(Built::plain(t.mul(v[0], v[1])?)) },
        Case {
            name: "affine_and_mul_const",
            shapes: vec![s(&[4, 2])],
            build: |t, v| {
                let a = t.affine(v[0], -1.7, 0.3);
                let c = Tensor::new(vec![4, 2], vec![0.5, -2.0, 1.0, 3.0, 0.0, 1.5, -0.25, 2.0])?;
                Ok(Built::plain(t.mul_const(a, c)?))
            },
        },
        Case {
            name: "channel_affine",
            shapes: vec![s(&[2, 3, 4]), s(&[3]), s(&[3])],
            build: |t, v| Ok(Built::plain(t.channel_affine(v[0], v[1], v[2])?)),
        },
        Case {
            name: "bn_fold_into_conv",
            shapes: vec![s(&[3, 6]), s(&[3, 3, 3]), s(&[3]), s(&[3]), s(&[3])],
            build: folded_conv,
        },
        Case {
            name: "time_step_and_slice",
            shapes: vec![s(&[2, 6, 4])],
            build: |t, v| {
                let x = t.time_step(v[0], 2)?;
                Ok(Built::plain(t.slice_last(x, 1, 3)?))
            },
        },
        Case {
            name: "attention_scores",
            shapes: vec![s(&[2, 3, 4]), s(&[2, 3, 4])],
            build: |t, v| Ok(Built::plain(t.attention_scores(v[0], v[1], 0.5)?)),
        },
        Case { name: "softmax", shapes: vec![s(&[2, 3, 4])], build: |t, v| Ok(Built::plain(t.softmax(v[0]))) },
        Case {
            name: "attention_mix",
            shapes: vec![s(&[2, 4, 4]), s(&[2, 3, 4])],
            build: |t, v| Ok(Built::plain(t.attention_mix(v[0], v[1])?)),
        },
        Case {
            name: "cross_entropy",
            shapes: vec![s(&[4, 3])],
            build: |t, v| Ok(Built::plain(t.cross_entropy(v[0], &[0, 2, 1, 1])?)),
        },
        Case {
            name: "lstm_unrolled_5_steps",
            shapes: vec![s(&[2, 3, 5]), s(&[12, 3]), s(&[12, 3]), s(&[12])],
            build: lstm_unrolled,
        },
        Case {
            name: "one_head_attention",
            shapes: vec![
                s(&[2, 3, 4]),
                s(&[3, 3, 1]),
                s(&[3]),
                s(&[3, 3, 1]),
                s(&[3]),
                s(&[3, 3, 1]),
                s(&[3]),
                s(&[3, 3, 1]),
                s(&[3]),
            ],
            build: attention_block,
        },
    ]
}
