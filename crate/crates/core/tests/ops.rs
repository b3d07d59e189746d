use footstrike::error::Error;
use footstrike::tensor::ops::{self, AttentionWeights, BatchNorm, BnMode, LstmWeights};
use footstrike::Tensor;
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn close(a: &Tensor, b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "{:?} vs {b:?}", a.data());
    for (x, y) in a.data().iter().zip(b) {
        assert!((x - y).abs() <= tol, "{:?} vs {b:?}", a.data());
    }
}

/// Plain nested-loop convolution with same zero padding.
fn conv_oracle(x: &[Vec<f64>], w: &[Vec<Vec<f64>>], b: &[f64]) -> Vec<Vec<f64>> {
    let l = x[0].len() as isize;
    let k = w[0][0].len() as isize;
    (0..w.len())
        .map(|o| {
            (0..l)
                .map(|t| {
                    let mut acc = b[o];
                    for (c, xc) in x.iter().enumerate() {
                        for j in 0..k {
                            let s = t + j - k / 2;
                            if (0..l).contains(&s) {
                                acc += w[o][c][j as usize] * xc[s as usize];
                            }
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

#[test]
fn conv1d_examples() {
    let y = ops::conv1d(&t(&[1, 3], &[1., 2., 3.]), &t(&[1, 1, 1], &[1.]), Some(&t(&[1], &[0.]))).unwrap();
    close(&y, &[1., 2., 3.], 0.0);
    let y = ops::conv1d(&Tensor::zeros(&[3, 25]), &Tensor::zeros(&[4, 3, 3]), None).unwrap();
    assert_eq!(y.shape(), &[4, 25]);
    let y = ops::conv1d(&t(&[1, 4], &[1., 0., 2., 0.]), &t(&[1, 1, 3], &[1., 1., 1.]), Some(&t(&[1], &[0.]))).unwrap();
    close(&y, &[1., 3., 2., 2.], 0.0);
}

#[test]
fn conv1d_names_the_bad_dimension() {
    let err = ops::conv1d(&Tensor::zeros(&[2, 5]), &Tensor::zeros(&[1, 3, 3]), None).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { expected: 3, got: 2, .. }), "{err:?}");
    assert!(err.to_string().contains("conv1d"));
}

#[test]
fn depthwise_examples() {
    let x = t(&[2, 4], &[1., -2., 3., 0.5, 4., 4., -1., 2.]);
    let y = ops::depthwise_conv1d(&x, &t(&[2, 3], &[0., 1., 0., 0., 1., 0.]), Some(&Tensor::zeros(&[2]))).unwrap();
    assert_eq!(y, x);
    let y = ops::depthwise_conv1d(&x, &Tensor::zeros(&[2, 3]), Some(&t(&[2], &[5., 7.]))).unwrap();
    close(&y, &[5., 5., 5., 5., 7., 7., 7., 7.], 0.0);
    assert!(ops::depthwise_conv1d(&x, &Tensor::zeros(&[3, 3]), None).is_err());
}

#[test]
fn depthwise_matches_per_channel_conv() {
    let x: Vec<f64> = (0..24).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
    let w: Vec<f64> = (0..9).map(|i| ((i * 5 % 7) as f64 - 3.0) / 2.0).collect();
    let b = [0.5, -1.0, 2.0];
    let y = ops::depthwise_conv1d(&t(&[3, 8], &x), &t(&[3, 3], &w), Some(&t(&[3], &b))).unwrap();
    for c in 0..3 {
        let oracle = conv_oracle(&[x[c * 8..c * 8 + 8].to_vec()], &[vec![w[c * 3..c * 3 + 3].to_vec()]], &[b[c]]);
        close(&t(&[8], &y.data()[c * 8..c * 8 + 8]), &oracle[0], 1e-12);
    }
}

#[test]
fn maxpool_examples() {
    close(&ops::maxpool1d(&t(&[1, 4], &[1., 3., 2., 5.])).unwrap(), &[3., 5.], 0.0);
    assert_eq!(ops::maxpool1d(&Tensor::zeros(&[1, 5])).unwrap().shape(), &[1, 2]);
    close(&ops::maxpool1d(&t(&[1, 2], &[-1., -3.])).unwrap(), &[-1.], 0.0);
    assert!(ops::maxpool1d(&Tensor::zeros(&[2, 1])).is_err());
}

#[test]
fn global_avg_pool_examples() {
    close(&ops::global_avg_pool(&t(&[2, 2], &[1., 3., 2., 2.])).unwrap(), &[2., 2.], 0.0);
    close(&ops::global_avg_pool(&Tensor::filled(&[1, 7], 0.3)).unwrap(), &[0.3], 1e-15);
    close(&ops::global_avg_pool(&t(&[3, 1], &[4., 5., 6.])).unwrap(), &[4., 5., 6.], 0.0);
}

#[test]
fn dense_examples() {
    let x = t(&[2], &[0.3, -2.0]);
    let eye = t(&[2, 2], &[1., 0., 0., 1.]);
    assert_eq!(ops::dense(&x, &eye, Some(&Tensor::zeros(&[2]))).unwrap(), x);
    close(&ops::dense(&x, &Tensor::zeros(&[2, 2]), Some(&t(&[2], &[4., 5.]))).unwrap(), &[4., 5.], 0.0);
    let y = ops::dense(&t(&[2], &[1., 1.]), &t(&[2, 2], &[1., 2., 3., 4.]), Some(&t(&[2], &[0., 1.]))).unwrap();
    close(&y, &[3., 8.], 0.0);
    assert!(ops::dense(&t(&[3], &[1., 1., 1.]), &eye, None).is_err());
}

#[test]
fn batchnorm_examples() {
    let x = t(&[2, 2, 3], &[1., -2., 3., 0.5, 7., -1., 2., 2., 0., 4., 1., 1.]);
    let mut bn = BatchNorm::new(2);
    bn.eps = 0.0;
    assert_eq!(bn.forward(&x, BnMode::Eval).unwrap(), x);

    let mut bn = BatchNorm::new(2);
    bn.gamma = Tensor::zeros(&[2]);
    bn.beta = t(&[2], &[0.25, -3.0]);
    let y = bn.forward(&x, BnMode::Eval).unwrap();
    for (i, v) in y.data().iter().enumerate() {
        assert_eq!(*v, if (i / 3) % 2 == 0 { 0.25 } else { -3.0 });
    }

    // two identical samples of a single time step: batch variance is zero
    let pair = t(&[2, 2, 1], &[1.5, -0.5, 1.5, -0.5]);
    let mut bn = BatchNorm::new(2);
    let y = bn.forward(&pair, BnMode::Train).unwrap();
    close(&y, &[0.; 4], 0.0);
    close(&bn.running_mean, &[0.15, -0.05], 1e-15);

    let mut bad = BatchNorm::new(2);
    bad.running_var = t(&[2], &[1.0, -0.5]);
    assert!(bad.forward(&x, BnMode::Eval).is_err());
}

#[test]
fn hard_activation_examples() {
    assert_eq!(ops::hardsigmoid(0.0), 0.5);
    assert_eq!(ops::hardtanh(10.0), 1.0);
    assert_eq!(ops::hardtanh(-10.0), -1.0);
    assert_eq!(ops::hardsigmoid(2.0), 1.0);
    assert_eq!(ops::hardsigmoid(-2.0), 0.0);
    assert_eq!(ops::relu(-0.1), 0.0);
    assert_eq!(ops::relu(0.7), 0.7);
}

#[test]
fn lstm_examples() {
    let zeros = LstmWeights { w_ih: Tensor::zeros(&[8, 3]), w_hh: Tensor::zeros(&[8, 2]), bias: Tensor::zeros(&[8]) };
    let (h, c) = ops::lstm_cell(&t(&[3], &[1., 2., 3.]), &Tensor::zeros(&[2]), &Tensor::zeros(&[2]), &zeros).unwrap();
    close(&h, &[0., 0.], 0.0);
    close(&c, &[0., 0.], 0.0);

    // saturated gates: i = f = o = 1, g = 1
    let big =
        LstmWeights { w_ih: Tensor::zeros(&[4, 1]), w_hh: Tensor::zeros(&[4, 1]), bias: Tensor::filled(&[4], 50.0) };
    let (h, c) = ops::lstm_cell(&t(&[1], &[0.]), &t(&[1], &[0.]), &t(&[1], &[-0.3]), &big).unwrap();
    close(&c, &[0.7], 1e-15);
    close(&h, &[0.7], 1e-15);

    let w = LstmWeights {
        w_ih: t(&[4, 1], &[1., 2., -1., 0.5]),
        w_hh: t(&[4, 1], &[0.5, -1., 2., 1.]),
        bias: t(&[4], &[0.1, 0., 0.3, -0.2]),
    };
    let (h, c) = ops::lstm_cell(&t(&[1], &[0.5]), &t(&[1], &[0.2]), &t(&[1], &[0.4]), &w).unwrap();
    // i = hs(0.7) = 0.675, f = hs(0.8) = 0.7, g = ht(0.2) = 0.2, o = hs(0.25) = 0.5625
    close(&c, &[0.415], 1e-15);
    close(&h, &[0.2334375], 1e-15);

    assert!(ops::lstm_cell(&t(&[1], &[0.5]), &t(&[2], &[0., 0.]), &t(&[2], &[0., 0.]), &w).is_err());
}

fn eye(d: usize) -> Tensor {
    let mut m = Tensor::zeros(&[d, d]);
    for i in 0..d {
        m.data_mut()[i * d + i] = 1.0;
    }
    m
}

#[test]
fn attention_examples() {
    let x = t(&[3, 2], &[1., 2., -1., 0.5, 0., 3.]);
    let wo = t(&[2, 2], &[1., -1., 0.5, 2.]);
    let bo = t(&[2], &[0.1, 0.2]);
    let wv = t(&[2, 2], &[2., 0., 1., 1.]);
    let bv = t(&[2], &[0., -1.]);
    let base = AttentionWeights {
        wq: eye(2),
        bq: Tensor::zeros(&[2]),
        wk: Tensor::zeros(&[2, 2]),
        bk: Tensor::zeros(&[2]),
        wv: wv.clone(),
        bv: bv.clone(),
        wo: wo.clone(),
        bo: bo.clone(),
    };
    // uniform attention: every row is Wo(mean of value rows) + bo
    let y = ops::one_head_attention(&x, &base).unwrap();
    let v: Vec<Tensor> =
        (0..3).map(|i| ops::dense(&t(&[2], &x.data()[2 * i..2 * i + 2]), &wv, Some(&bv)).unwrap()).collect();
    let mean = t(
        &[2],
        &[
            (v[0].data()[0] + v[1].data()[0] + v[2].data()[0]) / 3.0,
            (v[0].data()[1] + v[1].data()[1] + v[2].data()[1]) / 3.0,
        ],
    );
    let row = ops::dense(&mean, &wo, Some(&bo)).unwrap();
    for i in 0..3 {
        close(&t(&[2], &y.data()[2 * i..2 * i + 2]), row.data(), 1e-12);
    }

    // one token attends only to itself
    let single = t(&[1, 2], &[0.7, -1.2]);
    let y = ops::one_head_attention(&single, &AttentionWeights { wk: eye(2), ..base.clone() }).unwrap();
    let expect = ops::dense(&ops::dense(&t(&[2], &[0.7, -1.2]), &wv, Some(&bv)).unwrap(), &wo, Some(&bo)).unwrap();
    close(&y, expect.data(), 1e-12);

    // two orthogonal tokens, identity q/k, Wv = diag(2, 1), bo = (0.5, 0)
    let x = t(&[2, 2], &[1., 0., 0., 1.]);
    let w = AttentionWeights {
        wq: eye(2),
        bq: Tensor::zeros(&[2]),
        wk: eye(2),
        bk: Tensor::zeros(&[2]),
        wv: t(&[2, 2], &[2., 0., 0., 1.]),
        bv: Tensor::zeros(&[2]),
        wo: eye(2),
        bo: t(&[2], &[0.5, 0.]),
    };
    let y = ops::one_head_attention(&x, &w).unwrap();
    let e = (0.5f64).sqrt().exp();
    let p = e / (e + 1.0);
    close(&y, &[2.0 * p + 0.5, 1.0 - p, 2.0 * (1.0 - p) + 0.5, p], 1e-12);
}

fn seq(c: usize, l: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, c * l)
}

proptest! {
    #[test]
    fn gap_ignores_time_order(data in seq(3, 6), perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        let x = t(&[3, 6], &data);
        let shuffled: Vec<f64> = (0..18).map(|i| data[(i / 6) * 6 + perm[i % 6]]).collect();
        let a = ops::global_avg_pool(&x).unwrap();
        let b = ops::global_avg_pool(&t(&[3, 6], &shuffled)).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_dominates_pair_mean(data in seq(2, 9)) {
        let y = ops::maxpool1d(&t(&[2, 9], &data)).unwrap();
        for c in 0..2 {
            for i in 0..4 {
                let (a, b) = (data[c * 9 + 2 * i], data[c * 9 + 2 * i + 1]);
                prop_assert!(y.data()[c * 4 + i] >= (a + b) / 2.0);
            }
        }
    }

    #[test]
    fn maxpool_ignores_the_odd_trailing_column(data in seq(2, 7), extra in prop::collection::vec(-3.0..3.0f64, 2)) {
        let a = ops::maxpool1d(&t(&[2, 7], &data)).unwrap();
        let mut changed = data.clone();
        changed[6] = extra[0];
        changed[13] = extra[1];
        prop_assert_eq!(a, ops::maxpool1d(&t(&[2, 7], &changed)).unwrap());
    }

    #[test]
    fn attention_rows_sum_to_one(q in seq(4, 5), k in seq(4, 5), scale in 0.1..20.0f64) {
        let s = ops::attention_scores(&t(&[1, 4, 5], &q), &t(&[1, 4, 5], &k), scale).unwrap();
        let p = ops::softmax_last(&s);
        for row in p.data().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn pointwise_conv_is_dense_per_step(x in seq(3, 7), w in seq(2, 3), b in seq(1, 2)) {
        let y = ops::conv1d(&t(&[3, 7], &x), &t(&[2, 3, 1], &w), Some(&t(&[2], &b))).unwrap();
        for step in 0..7 {
            let col: Vec<f64> = (0..3).map(|c| x[c * 7 + step]).collect();
            let d = ops::dense(&t(&[3], &col), &t(&[2, 3], &w), Some(&t(&[2], &b))).unwrap();
            for o in 0..2 {
                prop_assert!((y.data()[o * 7 + step] - d.data()[o]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn separable_with_one_input_channel_is_conv(x in seq(1, 8), dw in seq(1, 3), db in -1.0..1.0f64, pw in seq(4, 1), pb in seq(4, 1)) {
        let d = ops::depthwise_conv1d(&t(&[1, 8], &x), &t(&[1, 3], &dw), Some(&t(&[1], &[db]))).unwrap();
        let sep = ops::conv1d(&d, &t(&[4, 1, 1], &pw), Some(&t(&[4], &pb))).unwrap();
        let fused_w: Vec<f64> = (0..12).map(|i| pw[i / 3] * dw[i % 3]).collect();
        let fused_b: Vec<f64> = (0..4).map(|o| pw[o] * db + pb[o]).collect();
        let plain = ops::conv1d(&t(&[1, 8], &x), &t(&[4, 1, 3], &fused_w), Some(&t(&[4], &fused_b))).unwrap();
        for (u, v) in sep.data().iter().zip(plain.data()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_loop_oracle(x in seq(2, 6), w in seq(3, 6), b in seq(1, 3)) {
        let y = ops::conv1d(&t(&[2, 6], &x), &t(&[3, 2, 3], &w), Some(&t(&[3], &b))).unwrap();
        let xs: Vec<Vec<f64>> = x.chunks(6).map(<[f64]>::to_vec).collect();
        let ws: Vec<Vec<Vec<f64>>> = w.chunks(6).map(|o| o.chunks(3).map(<[f64]>::to_vec).collect()).collect();
        let oracle: Vec<f64> = conv_oracle(&xs, &ws, &b).concat();
        for (u, v) in y.data().iter().zip(&oracle) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }
}
