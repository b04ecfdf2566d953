mod common;

use cellnas::rng::RngState;
use cellnas::tensor::{ConvSpec, PoolKind, Tape, Tensor};
use cellnas::Error;
use common::{conv2d_naive, max_abs_diff, randn};
use proptest::prelude::*;

fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn conv_of_ones_sums_the_window() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = tape.conv2d(x, w, ConvSpec::default()).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
    assert_eq!(tape.data(y), &[9.0]);
}

#[test]
fn dilated_conv_spreads_an_impulse_on_a_stride_two_lattice() {
    let mut img = vec![0.0f32; 25];
    img[12] = 1.0;
    let kernel: Vec<f32> = (1..=9).map(|v| v as f32).collect();
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(t(&[1, 1, 5, 5], img));
    let w = tape.constant(t(&[1, 1, 3, 3], kernel.clone()));
    let spec = ConvSpec {
        dilation: 2,
        padding: 2,
        ..Default::default()
    };
    let y = tape.conv2d(x, w, spec).unwrap();
    let y = tape.data(y);
    for i in 0..5 {
        for j in 0..5 {
            let expect = if i % 2 == 0 && j % 2 == 0 {
                kernel[(2 - i / 2) * 3 + (2 - j / 2)]
            } else {
                0.0
            };
            assert_eq!(y[i * 5 + j], expect, "({i}, {j})");
        }
    }
}

#[test]
fn depthwise_conv_matches_loop_nest() {
    let mut rng = RngState::new(3);
    let (n, c, h, w, k) = (2, 6, 9, 7, 5);
    let x = randn::<f32>(&[n, c, h, w], &mut rng);
    let wt = randn::<f32>(&[c, 1, k, k], &mut rng);
    for stride in [1, 2] {
        let spec = ConvSpec {
            stride,
            dilation: 1,
            padding: 2,
            groups: c,
        };
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(wt.clone());
        let y = tape.conv2d(xv, wv, spec).unwrap();
        let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let ws: Vec<f64> = wt.data().iter().map(|&v| v as f64).collect();
        let (oracle, oh, ow) = conv2d_naive(&xs, (n, c, h, w), &ws, (c, k), stride, 1, 2, c);
        assert_eq!(tape.shape(y), &[n, c, oh, ow]);
        let got: Vec<f64> = tape.data(y).iter().map(|&v| v as f64).collect();
        assert!(max_abs_diff(&got, &oracle) < 1e-5);
    }
}

#[test]
fn conv_rejects_mismatched_channels() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[2, 2, 1, 1]));
    assert!(matches!(
        tape.conv2d(x, w, ConvSpec::default()),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn batch_norm_maps_constant_channel_to_beta() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full(&[4, 1, 3, 3], 7.5));
    let g = tape.constant(Tensor::full(&[1], 2.0));
    let b = tape.constant(Tensor::full(&[1], 5.0));
    let (y, mean, var) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
    assert!(tape.data(y).iter().all(|&v| (v - 5.0).abs() < 1e-6));
    assert_eq!(mean, vec![7.5]);
    assert_eq!(var, vec![0.0]);
}

#[test]
fn batch_norm_standardizes_each_channel() {
    let mut rng = RngState::new(11);
    let (n, c, hw) = (4, 3, 36);
    let x = Tensor::from_fn(&[n, c, 6, 6], |i| rng.normal(3.0, 2.0) + (i % 5) as f32);
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::full(&[c], 1.0));
    let b = tape.constant(Tensor::zeros(&[c]));
    let (y, _, _) = tape.batch_norm_train(xv, g, b, 1e-5).unwrap();
    let y = tape.data(y);
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|s| (0..hw).map(move |p| (s * c + ch) * hw + p))
            .map(|i| y[i] as f64)
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-5, "mean {m}");
        assert!((v - 1.0).abs() < 1e-3, "var {v}");
    }
}

#[test]
fn sigmoid_slope_at_zero_is_a_quarter() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(0.0), true);
    let y = tape.sigmoid(x);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert!((g.get(x).unwrap()[0] - 0.25).abs() < 1e-12);
    let h = 1e-4;
    let f = |v: f64| 1.0 / (1.0 + (-v).exp());
    assert!(((f(h) - f(-h)) / (2.0 * h) - 0.25).abs() < 1e-6);
}

#[test]
fn relu_clamps_negatives() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(t(&[4], vec![-2.0, -0.0, 0.5, 3.0]));
    let y = tape.relu(x);
    assert_eq!(tape.data(y), &[0.0, 0.0, 0.5, 3.0]);
}

fn one_to_nine() -> Tensor {
    t(&[1, 1, 3, 3], (1..=9).map(|v| v as f32).collect())
}

#[test]
fn pooling_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(one_to_nine());
    let avg = tape.pool2d(x, PoolKind::Avg, 3, 1, 1).unwrap();
    let max = tape.pool2d(x, PoolKind::Max, 3, 1, 1).unwrap();
    assert_eq!(tape.data(avg)[4], 5.0);
    assert_eq!(tape.data(max)[4], 9.0);
    // padding excluded from the divisor: corner window holds 1, 2, 4, 5
    assert_eq!(tape.data(avg)[0], 3.0);
    assert_eq!(tape.data(max)[0], 5.0);
}

#[test]
fn max_pool_routes_ties_to_the_first_index() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::full(&[1, 1, 2, 2], 1.0), true);
    let y = tape.pool2d(x, PoolKind::Max, 2, 2, 0).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn pool_rejects_empty_output() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
    assert!(tape.pool2d(x, PoolKind::Avg, 3, 1, 0).is_err());
}

#[test]
fn global_avg_pool_and_linear() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(one_to_nine());
    let p = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.shape(p), &[1, 1]);
    assert_eq!(tape.data(p), &[5.0]);
    let w = tape.constant(t(&[2, 1], vec![2.0, -1.0]));
    let b = tape.constant(t(&[2], vec![0.5, 0.25]));
    let y = tape.linear(p, w, Some(b)).unwrap();
    assert_eq!(tape.data(y), &[10.5, -4.75]);
}

#[test]
fn embedding_looks_up_rows_and_names_bad_indices() {
    let mut tape = Tape::<f32>::new();
    let table = tape.constant(t(&[3, 2], vec![0.0, 0.1, 1.0, 1.1, 2.0, 2.1]));
    let y = tape.embedding(&[2, 0], table, "site").unwrap();
    assert_eq!(tape.data(y), &[2.0, 2.1, 0.0, 0.1]);
    let err = tape.embedding(&[1, 3], table, "site").unwrap_err();
    match &err {
        Error::IndexOutOfRange { field, index, .. } => {
            assert_eq!(field, "site");
            assert_eq!(*index, 3);
        }
        other => panic!("unexpected {other:?}"),
    }
    let msg = err.to_string();
    assert!(msg.contains("site") && msg.contains('3'), "{msg}");
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[3]));
    let y = tape.softmax(x, 0).unwrap();
    for &v in tape.data(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-7);
    }
}

#[test]
fn dropout_with_zero_rate_is_identity() {
    let mut rng = RngState::new(0);
    let x = randn::<f32>(&[4, 5], &mut rng);
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(x.clone());
    let y = tape.dropout(xv, 0.0, true, &mut rng).unwrap();
    assert_eq!(tape.data(y), x.data());
    let z = tape.dropout(xv, 0.5, false, &mut rng).unwrap();
    assert_eq!(tape.data(z), x.data());
}

#[test]
fn dropout_keeps_the_expected_value() {
    let mut rng = RngState::new(5);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full(&[20_000], 1.0));
    let y = tape.dropout(x, 0.2, true, &mut rng).unwrap();
    let data = tape.data(y);
    let kept = data.iter().filter(|&&v| v != 0.0).count() as f64 / data.len() as f64;
    assert!((kept - 0.8).abs() < 0.02);
    assert!(data.iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-6));
}

#[test]
fn cross_entropy_of_uniform_logits_is_log_classes() {
    for c in [2usize, 5, 10] {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3, c]));
        for s in [0.0, 0.1] {
            let l = tape.cross_entropy_smoothed(x, &[0, 1, c - 1], s).unwrap();
            assert!((tape.value(l).item() - (c as f64).ln()).abs() < 1e-12);
        }
    }
}

#[test]
fn cross_entropy_smoothing_matches_hand_formula() {
    let logits = [2.0f64, 0.5, -1.0];
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(vec![1, 3], logits.to_vec()).unwrap());
    let l = tape.cross_entropy_smoothed(x, &[1], 0.1).unwrap();
    let lse = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
    let q = [0.05, 0.9, 0.05];
    let expect: f64 = q.iter().zip(logits).map(|(q, z)| -q * (z - lse)).sum();
    assert!((tape.value(l).item() - expect).abs() < 1e-12);
    assert!(tape.cross_entropy_smoothed(x, &[3], 0.1).is_err());
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
    let s = tape.sum(x);
    assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[1.0, 1.0, 1.0]);
    let sq = tape.mul(x, x).unwrap();
    let s2 = tape.sum(sq);
    assert_eq!(tape.backward(s2).unwrap().get(x).unwrap(), &[2.0, -4.0, 1.0]);
    assert!(tape.backward(sq).is_err());
    // x feeds the loss twice: d/dx (sum(x) + sum(x*x)) = 1 + 2x
    let total = tape.add(s, s2).unwrap();
    assert_eq!(tape.backward(total).unwrap().get(x).unwrap(), &[3.0, -3.0, 2.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::full(&[2], 3.0));
    let x = tape.leaf(Tensor::full(&[2], 1.0), true);
    let y = tape.mul(c, x).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(x).unwrap(), &[3.0, 3.0]);
}

#[test]
fn shift_and_channel_resize() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(one_to_nine());
    let s = tape.shift2d(x, 1, 1).unwrap();
    assert_eq!(tape.data(s), &[5.0, 6.0, 0.0, 8.0, 9.0, 0.0, 0.0, 0.0, 0.0]);
    let up = tape.channel_resize(x, 3).unwrap();
    assert_eq!(tape.shape(up), &[1, 3, 3, 3]);
    let down = tape.channel_resize(up, 1).unwrap();
    assert_eq!(tape.data(down), tape.data(x));
}

#[test]
fn concat_along_channels() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::full(&[2, 1, 2, 2], 1.0));
    let b = tape.constant(Tensor::full(&[2, 2, 2, 2], 2.0));
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.shape(c), &[2, 3, 2, 2]);
    let d = tape.data(c);
    assert_eq!(&d[..4], &[1.0; 4]);
    assert_eq!(&d[4..12], &[2.0; 8]);
    assert_eq!(&d[12..16], &[1.0; 4]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        rows in 1usize..5,
        cols in 1usize..12,
        shift in -50.0f64..50.0,
        seed in any::<u64>(),
    ) {
        let mut rng = RngState::new(seed);
        let x = Tensor::<f64>::from_fn(&[rows, cols], |_| rng.normal(0.0, 4.0) as f64);
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(x.clone());
        let ya = tape.softmax(a, 1).unwrap();
        let shifted = Tensor::from_fn(&[rows, cols], |i| x.data()[i] + shift);
        let b = tape.constant(shifted);
        let yb = tape.softmax(b, 1).unwrap();
        for r in 0..rows {
            let s: f64 = tape.data(ya)[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
        prop_assert!(max_abs_diff(tape.data(ya), tape.data(yb)) < 1e-6);
    }

    #[test]
    fn conv_matches_loop_nest(
        n in 1usize..3,
        groups in 1usize..3,
        cpg_in in 1usize..3,
        cpg_out in 1usize..3,
        h in 3usize..9,
        w in 3usize..9,
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3,
        dilation in 1usize..3,
        padding in 0usize..3,
        seed in any::<u64>(),
    ) {
        let (c_in, c_out) = (groups * cpg_in, groups * cpg_out);
        prop_assume!(h + 2 * padding > dilation * (k - 1) && w + 2 * padding > dilation * (k - 1));
        let mut rng = RngState::new(seed);
        let x = randn::<f64>(&[n, c_in, h, w], &mut rng);
        let wt = randn::<f64>(&[c_out, cpg_in, k, k], &mut rng);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(wt.clone());
        let y = tape.conv2d(xv, wv, ConvSpec { stride, dilation, padding, groups }).unwrap();
        let (oracle, oh, ow) = conv2d_naive(x.data(), (n, c_in, h, w), wt.data(), (c_out, k), stride, dilation, padding, groups);
        prop_assert_eq!(tape.shape(y), &[n, c_out, oh, ow][..]);
        prop_assert!(max_abs_diff(tape.data(y), &oracle) < 1e-10);
    }

    #[test]
    fn same_padded_pool_preserves_or_halves_size(
        h in 1usize..12,
        w in 1usize..12,
        stride in 1usize..3,
        max in any::<bool>(),
    ) {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1, 2, h, w], 1.5));
        let kind = if max { PoolKind::Max } else { PoolKind::Avg };
        let y = tape.pool2d(x, kind, 3, stride, 1).unwrap();
        prop_assert_eq!(tape.shape(y), &[1, 2, h.div_ceil(stride), w.div_ceil(stride)][..]);
        prop_assert!(tape.data(y).iter().all(|&v| (v - 1.5).abs() < 1e-6));
    }

    #[test]
    fn batch_norm_output_is_centered(seed in any::<u64>(), c in 1usize..4) {
        let mut rng = RngState::new(seed);
        let x = Tensor::<f64>::from_fn(&[3, c, 4, 4], |_| rng.normal(1.0, 3.0) as f64);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::full(&[c], 1.0));
        let b = tape.constant(Tensor::zeros(&[c]));
        let (y, _, _) = tape.batch_norm_train(xv, g, b, 1e-5).unwrap();
        let y = tape.data(y);
        for ch in 0..c {
            let m: f64 = (0..3).flat_map(|s| (0..16).map(move |p| (s * c + ch) * 16 + p)).map(|i| y[i]).sum::<f64>() / 48.0;
            prop_assert!(m.abs() < 1e-9);
        }
    }
}
