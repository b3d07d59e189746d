//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Tolerances and runtime budgets are pinned below.

#[path = "common/gradcheck.rs"]
mod gradcheck;
#[path = "common/reference.rs"]
mod reference;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use footstrike::dataio::{cap_balance, load_sessions, participants, synth_dataset, StrikeLabel, SynthConfig};
use footstrike::hwcost::{battery_life, energy, latency, CostModel, PlatformProfile};
use footstrike::models::{param_count, Arch, Mode, ModelConfig, HEEL};
use footstrike::quant::QuantParams;
use footstrike::search::{
    dominates, run_search, Candidate, Evaluator, LrSpace, SearchOptions, SearchSpace, SyntheticEvaluator, Trial,
};
use footstrike::stream::{
    feedback_latency, realtime_bound, simulate, worst_case_energy_rate, SimSummary, StreamConfig, Trigger,
    TriggerConfig,
};
use footstrike::train::{two_step, TrainConfig, WindowSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative tolerance of the energy identity on measured rows.
const ENERGY_REL_TOL: f64 = 0.005;
/// Absolute tolerance for quantities that are exact up to float rounding.
const EXACT_TOL: f64 = 1e-12;
const BATTERY_REL_TOL: f64 = 0.02;
const TRANSFORMER_MIN_AGREEMENT: usize = 99;
const E2E_MIN_F1: f64 = 0.95;
/// Environment variable pointing at an external session dataset.
const DATASET_ENV: &str = "FOOTSTRIKE_DATASET";

type Check = Result<String, String>;
/// Name, runtime budget and check.
type Criterion = (&'static str, Duration, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn cost_model(name: &str) -> Result<CostModel, String> {
    let p = PlatformProfile::builtin(name).map_err(|e| e.to_string())?;
    CostModel::new(p).map_err(|e| e.to_string())
}

fn c1_param_counts() -> Check {
    let golden = [
        (ModelConfig::cnn(3, 4), 173),
        (ModelConfig::sepcnn(3, 6), 137),
        (ModelConfig::lstm(24, 8), 2738),
        (ModelConfig::transformer(8, 4), 922),
    ];
    let mut got = Vec::new();
    for (cfg, want) in golden {
        let n = param_count(&cfg).map_err(|e| e.to_string())?;
        ensure(n == want, || format!("{}: {n} != {want}", cfg.label()))?;
        got.push(n.to_string());
    }
    Ok(got.join("/"))
}

fn c2_energy_identity() -> Check {
    let mut rows = 0;
    let mut worst: f64 = 0.0;
    for name in PlatformProfile::builtin_names() {
        let m = cost_model(name)?;
        for row in &m.profile.measured {
            let rel = (energy(row.power_mw, row.latency_ms) - row.energy_uj).abs() / row.energy_uj;
            ensure(rel < ENERGY_REL_TOL, || format!("{name} {}: relative error {rel:.4}", row.key.config().label()))?;
            worst = worst.max(rel);
            rows += 1;
        }
    }
    ensure(rows == 6, || format!("expected 6 measured rows, found {rows}"))?;
    Ok(format!("6 rows, worst relative error {:.3}%", worst * 100.0))
}

fn c3_clock_scaling() -> Check {
    let (large, small) = (cost_model("xc7s15")?, cost_model("ice40up5k")?);
    let mut parts = Vec::new();
    for (cfg, fast, slow) in [(ModelConfig::cnn(3, 4), 0.032, 0.160), (ModelConfig::sepcnn(3, 6), 0.028, 0.140)] {
        let a = large.estimate(&cfg).map_err(|e| e.to_string())?.latency_ms;
        let b = small.estimate(&cfg).map_err(|e| e.to_string())?.latency_ms;
        ensure(a == fast && b == slow, || format!("{}: {a} -> {b}, want {fast} -> {slow}", cfg.label()))?;
        let cycles = large.cycles(&cfg).map_err(|e| e.to_string())?;
        ensure(latency(cycles, 20e6) == 5.0 * latency(cycles, 100e6), || format!("{}: not 5x", cfg.label()))?;
        parts.push(format!("{a}->{b} ms"));
    }
    Ok(parts.join(", "))
}

fn c4_feedback_calculus() -> Check {
    let cfg = StreamConfig::default();
    let t_fb = feedback_latency(&cfg);
    let bound = realtime_bound(&cfg);
    let power = worst_case_energy_rate(&cfg, 0.350) / 1e3;
    ensure((t_fb - 0.5).abs() <= EXACT_TOL, || format!("T_feedback {t_fb}"))?;
    ensure((bound - 0.125).abs() <= EXACT_TOL, || format!("real-time bound {bound}"))?;
    ensure((power - 0.0028).abs() <= EXACT_TOL, || format!("worst-case power {power} mW"))?;
    Ok(format!("T_feedback {t_fb} s, bound {bound} s, {power} mW"))
}

fn c5_battery() -> Check {
    let cfg = StreamConfig::default();
    let rate = cfg.f / cfg.stride();
    let days = battery_life(&[1.25, 2.28], rate, 0.350, 320.0, 3.6).map_err(|e| e.to_string())?;
    let rel = (days - 13.6).abs() / 13.6;
    ensure(rel <= BATTERY_REL_TOL, || format!("{days:.3} days"))?;
    Ok(format!("{days:.2} days ({:.2}% off 13.6)", rel * 100.0))
}

fn c6_bit_exact() -> Check {
    const MODELS: u64 = 20;
    const INPUTS: usize = 100;
    let mut lines = Vec::new();
    for arch in Arch::ALL {
        let mut min_agree = usize::MAX;
        let mut exact_models = 0;
        for b in [4, 6, 8] {
            let size = match arch {
                Arch::Cnn1d | Arch::SepCnn1d => 3,
                Arch::Lstm => 24,
                Arch::Transformer => 8,
            };
            let cfg = ModelConfig::with_size(arch, size, b);
            for seed in 0..MODELS {
                let m = reference::calibrated(cfg.clone(), seed);
                let int = m.export_int().map_err(|e| e.to_string())?;
                let qp =
                    QuantParams::new(b, int.logit_scale().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                let x = reference::random_batch(&mut rng, INPUTS, cfg.c_in, cfg.n);
                let fake = m.forward(&x, Mode::FakeQuant).map_err(|e| e.to_string())?;
                let (mut exact, mut agree) = (0, 0);
                for (i, row) in fake.data().chunks(cfg.classes).enumerate() {
                    let q = int.forward_q(&reference::sample(&x, i)).map_err(|e| e.to_string())?;
                    let expect: Vec<i64> = row.iter().map(|&v| qp.quantize(v)).collect();
                    exact += usize::from(q == expect);
                    let argmax = |v: &[i64]| (0..v.len()).max_by_key(|&k| (v[k], std::cmp::Reverse(k))).unwrap();
                    agree += usize::from(argmax(&q) == argmax(&expect));
                }
                if arch == Arch::Transformer {
                    ensure(agree >= TRANSFORMER_MIN_AGREEMENT, || {
                        format!("{} seed {seed}: argmax agreement {agree}/{INPUTS}", cfg.label())
                    })?;
                } else {
                    ensure(exact == INPUTS, || format!("{} seed {seed}: {exact}/{INPUTS} exact", cfg.label()))?;
                }
                min_agree = min_agree.min(agree);
                exact_models += usize::from(exact == INPUTS);
            }
        }
        lines.push(format!("{arch} {exact_models}/60 exact (min argmax {min_agree})"));
    }
    Ok(lines.join(", "))
}

fn c7_gradients() -> Check {
    let cases = gradcheck::cases();
    let mut worst: (f64, &str) = (0.0, "");
    for case in &cases {
        for seed in 0..10 {
            let err = gradcheck::check(case, seed).map_err(|e| format!("{}: {e}", case.name))?;
            ensure(err < gradcheck::TOLERANCE, || format!("{} seed {seed}: relative error {err:.2e}", case.name))?;
            if err > worst.0 {
                worst = (err, case.name);
            }
        }
    }
    Ok(format!("{} ops x 10 seeds, worst {:.1e} ({})", cases.len(), worst.0, worst.1))
}

fn c8_trigger_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut events = 0;
    for stream in 0..1000 {
        let n = rng.random_range(1..=8);
        let bias = rng.random_range(0.3..0.95);
        let s = [0.25, 0.5, 0.75, 1.0][rng.random_range(0..4)];
        let cfg =
            StreamConfig { s, n_consec: n, cooldown: rng.random_range(0..=8) as f64 * 0.125, ..Default::default() };
        let preds: Vec<usize> = (0..1000).map(|_| usize::from(rng.random_bool(bias))).collect();
        let times: Vec<f64> = (0..1000).map(|k| (cfg.window_start(k) + cfg.w) as f64 / cfg.f).collect();
        let mut trigger = Trigger::new(TriggerConfig::from_stream(&cfg, HEEL)).map_err(|e| e.to_string())?;
        let mut got = Vec::new();
        for (i, (&p, &t)) in preds.iter().zip(&times).enumerate() {
            if trigger.step(p, t).map_err(|e| e.to_string())?.is_some() {
                got.push(i);
            }
        }
        let want = reference::reference_trigger(&preds, &times, HEEL, n, cfg.cooldown);
        ensure(got == want, || format!("stream {stream}: {} events vs {} from the reference", got.len(), want.len()))?;
        events += got.len();
    }
    Ok(format!("1000 streams, {events} events identical"))
}

fn genes(c: &Candidate) -> (usize, u32, usize, u64) {
    (c.size, c.bitwidth, c.batch_size, c.lr.to_bits())
}

/// Deployable trials not dominated by any other deployable trial.
fn brute_front(trials: &[Trial]) -> Vec<Candidate> {
    let mut v: Vec<Candidate> = trials
        .iter()
        .filter(|a| a.deployable && !trials.iter().any(|b| b.deployable && dominates(b, a)))
        .map(|t| t.config)
        .collect();
    v.sort_by_key(genes);
    v
}

fn c9_pareto_oracle() -> Check {
    let space = SearchSpace {
        arch: Arch::Cnn1d,
        sizes: vec![1, 2, 3, 4, 5],
        bitwidths: vec![4, 6, 8],
        batch_sizes: vec![16, 24, 32, 40, 48],
        lr: LrSpace::Grid(vec![1e-5, 3e-5, 1e-4, 3e-4, 1e-3]),
    };
    let total = space.discrete_size().unwrap_or(usize::MAX);
    ensure(total <= 500, || format!("space has {total} configurations"))?;
    let ev = SyntheticEvaluator { cost: cost_model("ice40up5k")? };
    let all: Vec<Trial> = space
        .enumerate()
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let e = ev.evaluate(&c, 0).unwrap();
            Trial {
                index: i,
                generation: 0,
                config: c,
                seed: 0,
                f1: e.f1,
                energy_uj: e.energy_uj,
                deployable: e.deployable,
                error: None,
            }
        })
        .collect();
    let oracle = brute_front(&all);
    ensure(!oracle.is_empty(), || "empty brute-force front".into())?;
    for force_ga in [true, false] {
        let opts = SearchOptions { budget: 500, population: 20, seed: 9, force_ga, ..Default::default() };
        let out = run_search(&space, &ev, &opts).map_err(|e| e.to_string())?;
        let mut front: Vec<Candidate> = out.front.iter().map(|&i| out.archive[i].config).collect();
        front.sort_by_key(genes);
        ensure(front == oracle, || {
            format!("force_ga={force_ga}: front of {} vs {} in the oracle", front.len(), oracle.len())
        })?;
    }
    Ok(format!("{total} configurations, front of {} matches (GA and exhaustive)", oracle.len()))
}

fn c10_end_to_end() -> Check {
    let stream = StreamConfig::default();
    let segments = synth_dataset(&SynthConfig::default()).map_err(|e| e.to_string())?;
    let segments = cap_balance(&segments, 3800, false);
    let set = WindowSet::from_segments(&segments, &stream).map_err(|e| e.to_string())?;
    let subject = participants(&segments)[0].clone();
    let cfg = ModelConfig::sepcnn(3, 6).with_n(stream.n());
    let tc = TrainConfig::default();
    let out = two_step(&cfg, &set, &subject, &tc, &tc).map_err(|e| e.to_string())?;
    ensure(out.test_f1_int >= E2E_MIN_F1, || format!("integer test F1 {:.4}", out.test_f1_int))?;

    let heel: Vec<[f64; 3]> = segments
        .iter()
        .filter(|s| s.participant == subject && s.label == StrikeLabel::Heel)
        .flat_map(|s| s.accel())
        .collect();
    let records = simulate(&heel, &stream, HEEL, |x| out.int_model.predict(x)).map_err(|e| e.to_string())?;
    let sim = SimSummary::from_records(&records);
    let earliest = stream.w as f64 / stream.f + 0.5;
    let first = sim.first_event_t.ok_or("no feedback event on the heel session")?;
    ensure(first >= earliest, || format!("first event at {first} s, before {earliest} s"))?;
    Ok(format!(
        "{subject}: integer test F1 {:.4} ({}/{} agree with fake-quant), {} events, first at {first:.2} s",
        out.test_f1_int,
        out.agreement,
        out.split.test.len(),
        sim.events
    ))
}

/// Human-data F1 values cannot be reproduced at desk scale; criteria 6 to 10
/// stand in for them. An external dataset, when supplied, gets a
/// best-effort SepCNN run whose result is reported but never gates.
fn c11_non_reproducibility() -> Check {
    let note = "human-data F1 (0.900/0.831/0.889/0.937, average 0.847) not reproducible here; 6-10 substitute";
    let Some(path) = std::env::var_os(DATASET_ENV) else {
        return Ok(format!("{note}; set {DATASET_ENV} for the optional dataset check"));
    };
    let report = (|| -> footstrike::Result<String> {
        let stream = StreamConfig::default();
        let segments = cap_balance(&load_sessions(Path::new(&path))?, 3800, true);
        let set = WindowSet::from_segments(&segments, &stream)?;
        let subject = participants(&segments).into_iter().next().unwrap_or_default();
        let tc = TrainConfig::default();
        let out = two_step(&ModelConfig::sepcnn(3, 6).with_n(stream.n()), &set, &subject, &tc, &tc)?;
        Ok(format!("{subject}: integer F1 {:.3} against a reported 0.831", out.test_f1_int))
    })();
    Ok(match report {
        Ok(r) => format!("{note}; dataset check (non-gating) {r}"),
        Err(e) => format!("{note}; dataset check (non-gating) failed: {e}"),
    })
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("parameter counts", Duration::from_secs(1), c1_param_counts),
        ("energy identity", Duration::from_secs(1), c2_energy_identity),
        ("clock scaling", Duration::from_secs(1), c3_clock_scaling),
        ("feedback calculus", Duration::from_secs(1), c4_feedback_calculus),
        ("battery life", Duration::from_secs(1), c5_battery),
        ("bit-exact quantization", Duration::from_secs(120), c6_bit_exact),
        ("gradient correctness", Duration::from_secs(60), c7_gradients),
        ("trigger oracle", Duration::from_secs(30), c8_trigger_oracle),
        ("pareto oracle", Duration::from_secs(60), c9_pareto_oracle),
        ("end-to-end synthetic study", Duration::from_secs(600), c10_end_to_end),
        ("non-reproducibility note", Duration::from_secs(600), c11_non_reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, budget, f)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let elapsed = start.elapsed();
        let result = result.and_then(|d| {
            if elapsed <= budget {
                Ok(d)
            } else {
                Err(format!("{d}; took {:.1} s, budget {} s", elapsed.as_secs_f64(), budget.as_secs()))
            }
        });
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += usize::from(result.is_err());
        println!("[{tag}] {:>2}. {name} ({:.2} s): {detail}", i + 1, elapsed.as_secs_f64());
    }
    println!("{} of 11 criteria passed", 11 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
