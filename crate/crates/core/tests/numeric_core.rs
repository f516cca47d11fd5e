mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use speckle_core::ops::*;
use speckle_core::tensor::Tensor;

const FD_STEP: f64 = 1e-4;
const FD_TOL_F64: f64 = 1e-5;
const FD_TOL_F32: f64 = 1e-2;

#[test]
fn conv_matches_naive_oracle_seeded() {
    let mut r = rng(42);
    let input = random_tensor(&mut r, &[6, 6, 2]);
    let k = random_tensor(&mut r, &[3, 3, 2, 3]);
    let b = random_tensor(&mut r, &[3]);
    let fast = conv2d_valid(&input, &k, &b).unwrap();
    let slow = naive_conv(&input, &k, &b);
    assert_eq!(fast.shape(), slow.shape());
    for (a, o) in fast.data().iter().zip(slow.data()) {
        assert!(rel_err(*a, *o, 1e-12) < 1e-6);
    }
}

#[test]
fn conv_f32_path_tracks_f64_oracle() {
    let mut r = rng(43);
    let input = random_tensor(&mut r, &[9, 7, 5]);
    let k = random_tensor(&mut r, &[3, 3, 5, 4]);
    let b = random_tensor(&mut r, &[4]);
    let fast = conv2d_valid(&input.cast::<f32>(), &k.cast(), &b.cast()).unwrap();
    let slow = naive_conv(&input, &k, &b);
    let scale = slow.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (a, o) in fast.data().iter().zip(slow.data()) {
        assert!((*a as f64 - o).abs() / scale < 1e-5);
    }
}

#[test]
fn conv_backward_matches_finite_differences() {
    let mut r = rng(7);
    let mut input = random_tensor(&mut r, &[5, 6, 2]);
    let mut k = random_tensor(&mut r, &[3, 3, 2, 3]);
    let mut b = random_tensor(&mut r, &[3]);
    let up = random_tensor(&mut r, &[3, 4, 3]);
    let g = conv2d_valid_backward(&input, &k, &up).unwrap();

    for i in 0..input.len() {
        let (kk, bb) = (k.clone(), b.clone());
        let n = central_diff(&mut input, i, FD_STEP, |x| {
            dot(&conv2d_valid(x, &kk, &bb).unwrap(), &up)
        });
        assert!(rel_err(g.input.data()[i], n, 1e-8) < FD_TOL_F64, "input {i}");
    }
    for i in 0..k.len() {
        let (xx, bb) = (input.clone(), b.clone());
        let n = central_diff(&mut k, i, FD_STEP, |kk| dot(&conv2d_valid(&xx, kk, &bb).unwrap(), &up));
        assert!(rel_err(g.kernels.data()[i], n, 1e-8) < FD_TOL_F64, "kernel {i}");
    }
    for i in 0..b.len() {
        let (xx, kk) = (input.clone(), k.clone());
        let n = central_diff(&mut b, i, FD_STEP, |bb| dot(&conv2d_valid(&xx, &kk, bb).unwrap(), &up));
        assert!(rel_err(g.bias.data()[i], n, 1e-8) < FD_TOL_F64, "bias {i}");
    }
}

#[test]
fn conv_backward_f32_within_loose_tolerance() {
    let mut r = rng(8);
    let input = random_tensor(&mut r, &[5, 5, 2]).cast::<f32>();
    let k = random_tensor(&mut r, &[3, 3, 2, 2]).cast::<f32>();
    let b = Tensor::<f32>::zeros(&[2]).unwrap();
    let up = random_tensor(&mut r, &[3, 3, 2]).cast::<f32>();
    let g = conv2d_valid_backward(&input, &k, &up).unwrap();
    let h = 1e-2f32;
    for i in 0..k.len() {
        let mut kp = k.clone();
        kp.data_mut()[i] += h;
        let mut km = k.clone();
        km.data_mut()[i] -= h;
        let f = |kk: &Tensor<f32>| -> f64 {
            let out = conv2d_valid(&input, kk, &b).unwrap();
            out.data()
                .iter()
                .zip(up.data())
                .map(|(a, w)| (*a as f64) * (*w as f64))
                .sum()
        };
        let n = (f(&kp) - f(&km)) / (2.0 * h as f64);
        assert!(rel_err(g.kernels.data()[i] as f64, n, 1e-3) < FD_TOL_F32, "kernel {i}");
    }
}

fn window_gap(x: &Tensor<f64>, y: usize, xx: usize, c: usize) -> f64 {
    let (w, ch) = (x.shape()[1], x.shape()[2]);
    let mut v: Vec<f64> = (0..4)
        .map(|j| x.data()[((2 * y + j / 2) * w + 2 * xx + j % 2) * ch + c])
        .collect();
    v.sort_by(f64::total_cmp);
    v[3] - v[2]
}

#[test]
fn maxpool_backward_matches_finite_differences() {
    let mut r = rng(11);
    let mut input = random_tensor(&mut r, &[7, 6, 3]);
    let trace = maxpool2(&input).unwrap();
    let up = random_tensor(&mut r, trace.output.shape());
    let g = maxpool2_backward(&trace, &up).unwrap();
    let (w, c) = (6, 3);
    let mut checked = 0;
    for i in 0..input.len() {
        let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
        if y / 2 < 3 && x / 2 < 3 && window_gap(&input, y / 2, x / 2, ch) < 10.0 * FD_STEP {
            continue;
        }
        let n = central_diff(&mut input, i, FD_STEP, |xx| dot(&maxpool2(xx).unwrap().output, &up));
        assert!(rel_err(g.data()[i], n, 1e-8) < FD_TOL_F64, "element {i}");
        checked += 1;
    }
    assert!(checked > 100);
}

#[test]
fn relu_backward_matches_finite_differences() {
    let mut r = rng(12);
    let mut input = random_tensor(&mut r, &[40]);
    let up = random_tensor(&mut r, &[40]);
    let g = relu_backward(&input, &up).unwrap();
    for i in 0..input.len() {
        if input.data()[i].abs() < 10.0 * FD_STEP {
            continue;
        }
        let n = central_diff(&mut input, i, FD_STEP, |x| dot(&relu(x), &up));
        assert!(rel_err(g.data()[i], n, 1e-8) < FD_TOL_F64);
    }
}

#[test]
fn dense_backward_matches_finite_differences() {
    let mut r = rng(13);
    let mut x = random_tensor(&mut r, &[8]);
    let mut w = random_tensor(&mut r, &[8, 5]);
    let mut b = random_tensor(&mut r, &[5]);
    let up = random_tensor(&mut r, &[5]);
    let g = dense_backward(&x, &w, &up).unwrap();
    for i in 0..x.len() {
        let (ww, bb) = (w.clone(), b.clone());
        let n = central_diff(&mut x, i, FD_STEP, |xx| dot(&dense(xx, &ww, &bb).unwrap(), &up));
        assert!(rel_err(g.input.data()[i], n, 1e-8) < FD_TOL_F64);
    }
    for i in 0..w.len() {
        let (xx, bb) = (x.clone(), b.clone());
        let n = central_diff(&mut w, i, FD_STEP, |ww| dot(&dense(&xx, ww, &bb).unwrap(), &up));
        assert!(rel_err(g.weights.data()[i], n, 1e-8) < FD_TOL_F64);
    }
    for i in 0..b.len() {
        let (xx, ww) = (x.clone(), w.clone());
        let n = central_diff(&mut b, i, FD_STEP, |bb| dot(&dense(&xx, &ww, bb).unwrap(), &up));
        assert!(rel_err(g.bias.data()[i], n, 1e-8) < FD_TOL_F64);
    }
}

#[test]
fn softmax_xent_grad_matches_finite_differences() {
    let mut r = rng(14);
    for trial in 0..10 {
        let k = 2 + trial;
        let mut logits = random_tensor(&mut r, &[k]);
        logits.scale(3.0);
        let class = r.random_range(0..k);
        let onehot = one_hot::<f64>(class, k).unwrap();
        let g = softmax_xent_grad(&softmax(&logits).unwrap(), &onehot).unwrap();
        assert!(g.sum().abs() < 1e-6);
        for i in 0..k {
            let n = central_diff(&mut logits, i, FD_STEP, |l| {
                cross_entropy(&softmax(l).unwrap(), &onehot).unwrap()
            });
            assert!(rel_err(g.data()[i], n, 1e-8) < FD_TOL_F64, "trial {trial} logit {i}");
        }
    }
}

#[test]
fn operations_are_deterministic() {
    let mut r = rng(15);
    let input = random_tensor(&mut r, &[12, 10, 4]).cast::<f32>();
    let k = random_tensor(&mut r, &[3, 3, 4, 8]).cast::<f32>();
    let b = random_tensor(&mut r, &[8]).cast::<f32>();
    let a1 = conv2d_valid(&input, &k, &b).unwrap();
    let a2 = conv2d_valid(&input, &k, &b).unwrap();
    assert_eq!(
        a1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        a2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    let up = a1.map(|v| v * 0.5);
    let g1 = conv2d_valid_backward(&input, &k, &up).unwrap();
    let g2 = conv2d_valid_backward(&input, &k, &up).unwrap();
    assert_eq!(g1.kernels, g2.kernels);
    assert_eq!(g1.input, g2.input);
}

fn shape3() -> impl Strategy<Value = (usize, usize, usize)> {
    (3usize..9, 3usize..9, 1usize..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_equals_naive((h, w, cin) in shape3(), cout in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let input = random_tensor(&mut r, &[h, w, cin]);
        let k = random_tensor(&mut r, &[3, 3, cin, cout]);
        let b = random_tensor(&mut r, &[cout]);
        let fast = conv2d_valid(&input, &k, &b).unwrap();
        let slow = naive_conv(&input, &k, &b);
        for (a, o) in fast.data().iter().zip(slow.data()) {
            prop_assert!(rel_err(*a, *o, 1e-12) < 1e-6);
        }
    }

    #[test]
    fn maxpool_equals_naive_and_conserves_mass((h, w, c) in shape3(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let input = random_tensor(&mut r, &[h, w, c]);
        let trace = maxpool2(&input).unwrap();
        prop_assert_eq!(&trace.output, &naive_maxpool(&input));
        for (&idx, &v) in trace.argmax.iter().zip(trace.output.data()) {
            prop_assert_eq!(input.data()[idx], v);
        }
        let up = random_tensor(&mut r, trace.output.shape());
        let g = maxpool2_backward(&trace, &up).unwrap();
        // continuous random inputs have no ties, so routing is one-to-one
        let mut routed: Vec<f64> = g.data().iter().copied().filter(|&v| v != 0.0).collect();
        let mut sent: Vec<f64> = up.data().iter().copied().filter(|&v| v != 0.0).collect();
        routed.sort_by(f64::total_cmp);
        sent.sort_by(f64::total_cmp);
        prop_assert_eq!(routed, sent);
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        logits in prop::collection::vec(-50.0f64..50.0, 1..40),
        shift in prop::sample::select(vec![-1000.0, -3.5, 0.0, 1.25, 1000.0]),
    ) {
        let x = Tensor::vector(&logits).unwrap();
        let p = softmax(&x).unwrap();
        prop_assert!((p.sum() - 1.0).abs() < 1e-6);
        prop_assert!(p.data().iter().all(|&v| v > 0.0 && v <= 1.0));
        let q = softmax(&x.map(|v| v + shift)).unwrap();
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn relu_identity(values in prop::collection::vec(-10.0f32..10.0, 1..64)) {
        let x = Tensor::vector(&values).unwrap();
        let pos = relu(&x);
        let neg = relu(&x.map(|v| -v));
        for ((p, n), v) in pos.data().iter().zip(neg.data()).zip(&values) {
            prop_assert_eq!(p + n, v.abs());
        }
    }

    #[test]
    fn flatten_reshape_identity((h, w, c) in shape3(), seed in any::<u64>()) {
        let x = random_tensor(&mut rng(seed), &[h, w, c]);
        let back = flatten(&x).unwrap().reshape(&[h, w, c]).unwrap();
        prop_assert_eq!(back, x);
    }
}
