use footstrike::dataio::{synth_dataset, SynthConfig};
use footstrike::models::{Mode, Model, ModelConfig, HEEL};
use footstrike::stream::StreamConfig;
use footstrike::train::{
    f1_score, finetune_qat, fit, generalized_split, predict, predict_int, train_generalized, two_step, TrainConfig,
};
use footstrike::train::{split_participant, SplitRatios, WindowSet};
use proptest::prelude::*;

fn dataset(participants: usize, seconds: f64) -> WindowSet {
    let segs = synth_dataset(&SynthConfig { seed: 3, participants, seconds_per_class: seconds, ..Default::default() })
        .unwrap();
    WindowSet::from_segments(&segs, &StreamConfig::default()).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, patience: 5, seed: 1, ..Default::default() }
}

#[test]
fn no_test_window_shares_samples_with_training() {
    let set = dataset(3, 20.0);
    for p in set.participants() {
        let split = split_participant(&set, &p, &SplitRatios::default()).unwrap();
        for &i in &split.train {
            for &j in &split.test {
                let (a, b) = (&set.meta[i], &set.meta[j]);
                let shared = a.segment == b.segment && a.start < b.end && b.start < a.end;
                assert!(!shared, "{p}: train {a:?} overlaps test {b:?}");
            }
        }
        let mut all: Vec<usize> = split.train.iter().chain(&split.val).chain(&split.test).copied().collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n, "blocks must be disjoint");
        assert_eq!(split, split_participant(&set, &p, &SplitRatios::default()).unwrap());
    }
}

#[test]
fn held_out_participant_is_excluded() {
    let set = dataset(2, 20.0);
    let ids = set.participants();
    let split = generalized_split(&set, &ids[1], &SplitRatios::default()).unwrap();
    assert!(!split.train.is_empty());
    assert!(split.train.iter().chain(&split.val).all(|&i| set.meta[i].participant == ids[0]));
    assert!(train_generalized(&ModelConfig::sepcnn(3, 6), &set, "nobody", &quick(1)).is_err());
}

#[test]
fn training_loss_falls_and_is_deterministic() {
    let set = dataset(2, 20.0);
    let ids = set.participants();
    let cfg = ModelConfig::sepcnn(3, 6);
    let tc = TrainConfig { patience: 50, ..quick(5) };
    let (a, out) = train_generalized(&cfg, &set, &ids[1], &tc).unwrap();
    let losses: Vec<f64> = out.log.iter().map(|l| l.train_loss).collect();
    assert_eq!(losses.len(), 5);
    assert!(losses[4] < losses[0], "{losses:?}");
    // least-squares slope over the five epochs
    let mean = losses.iter().sum::<f64>() / 5.0;
    let slope: f64 = losses.iter().enumerate().map(|(i, l)| (i as f64 - 2.0) * (l - mean)).sum();
    assert!(slope < 0.0, "{losses:?}");

    let (b, _) = train_generalized(&cfg, &set, &ids[1], &tc).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
}

#[test]
fn zero_epoch_finetune_only_calibrates() {
    let set = dataset(2, 20.0);
    let p = &set.participants()[0];
    let split = split_participant(&set, p, &SplitRatios::default()).unwrap();
    let model = Model::build(ModelConfig::cnn(3, 4), 5).unwrap();
    let (tuned, log) = finetune_qat(&model, &set, &split, &quick(0)).unwrap();
    assert!(log.log.is_empty());
    assert_eq!(tuned.params, model.params);
    assert!(tuned.quant.as_ref().unwrap().is_calibrated());
    tuned.export_int().unwrap();
}

#[test]
fn finetune_rejects_unsupported_bitwidths() {
    let set = dataset(2, 20.0);
    let split = split_participant(&set, &set.participants()[0], &SplitRatios::default()).unwrap();
    let mut model = Model::build(ModelConfig::cnn(3, 4), 5).unwrap();
    model.config.bitwidth = 5;
    assert!(finetune_qat(&model, &set, &split, &quick(1)).is_err());
}

#[test]
fn exported_model_predicts_like_fake_quant() {
    let set = dataset(3, 20.0);
    let subject = set.participants()[2].clone();
    let out = two_step(&ModelConfig::cnn(3, 8), &set, &subject, &quick(8), &quick(4)).unwrap();
    let fake = predict(&out.model, &set, &out.split.test, Mode::FakeQuant).unwrap();
    let int = predict_int(&out.int_model, &set, &out.split.test).unwrap();
    assert_eq!(fake, int);
    assert_eq!(out.agreement, out.split.test.len());
    let labels = set.labels(&out.split.test);
    assert_eq!(out.test_f1_int, f1_score(&int, &labels, HEEL).unwrap());
}

#[test]
fn early_stopping_restores_the_best_epoch() {
    let set = dataset(2, 20.0);
    let split = split_participant(&set, &set.participants()[0], &SplitRatios::default()).unwrap();
    let mut m = Model::build(ModelConfig::sepcnn(2, 8), 2).unwrap();
    let out = fit(&mut m, &set, &split, &TrainConfig { patience: 3, ..quick(30) }, Mode::Float, "t").unwrap();
    let best = out.best_epoch.unwrap();
    assert!(out.log.len() <= best + 1 + 3);
    let val = footstrike::train::evaluate(&m, &set, &split.val, Mode::Float).unwrap();
    assert_eq!(val, out.best_val_f1);
}

proptest! {
    /// Swapping the roles of FP and FN leaves F1 unchanged.
    #[test]
    fn f1_is_symmetric_in_fp_and_fn(tp in 0usize..20, fp in 0usize..20, fn_ in 0usize..20, tn in 0usize..20) {
        prop_assume!(tp + fp + fn_ + tn > 0);
        let build = |fp: usize, fn_: usize| {
            let mut preds = Vec::new();
            let mut labels = Vec::new();
            for (n, p, l) in [(tp, 1, 1), (fp, 1, 0), (fn_, 0, 1), (tn, 0, 0)] {
                preds.extend(std::iter::repeat_n(p, n));
                labels.extend(std::iter::repeat_n(l, n));
            }
            f1_score(&preds, &labels, 1).unwrap()
        };
        let a = build(fp, fn_);
        prop_assert_eq!(a, build(fn_, fp));
        let oracle = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        prop_assert!((a - oracle).abs() < 1e-12);
    }
}
