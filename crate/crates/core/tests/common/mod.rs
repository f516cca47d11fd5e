//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speckle_core::model::{batch_gradients, batch_loss, forward, NetworkParams};
use speckle_core::ops::{conv2d_valid, dense, flatten};
use speckle_core::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
}

/// Quadruple-loop valid convolution straight from the definition.
pub fn naive_conv(input: &Tensor<f64>, kernels: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let cout = kernels.shape()[3];
    let (oh, ow) = (h - 2, w - 2);
    let x = |y: usize, xx: usize, c: usize| input.data()[(y * w + xx) * cin + c];
    let k = |dy: usize, dx: usize, ci: usize, co: usize| kernels.data()[((dy * 3 + dx) * cin + ci) * cout + co];
    let mut out = vec![0.0; oh * ow * cout];
    for y in 0..oh {
        for xx in 0..ow {
            for co in 0..cout {
                let mut acc = bias.data()[co];
                for dy in 0..3 {
                    for dx in 0..3 {
                        for ci in 0..cin {
                            acc += x(y + dy, xx + dx, ci) * k(dy, dx, ci, co);
                        }
                    }
                }
                out[(y * ow + xx) * cout + co] = acc;
            }
        }
    }
    Tensor::new(&[oh, ow, cout], out).unwrap()
}

/// Window-by-window 2×2 max with floor tiling.
pub fn naive_maxpool(input: &Tensor<f64>) -> Tensor<f64> {
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let mut out = Vec::new();
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            for ch in 0..c {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(input.data()[((2 * y + dy) * w + 2 * x + dx) * c + ch]);
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::new(&[h / 2, w / 2, c], out).unwrap()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central difference of `f` with respect to element `i` of `x`.
pub fn central_diff(x: &mut Tensor<f64>, i: usize, h: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> f64 {
    let orig = x.data()[i];
    x.data_mut()[i] = orig + h;
    let plus = f(x);
    x.data_mut()[i] = orig - h;
    let minus = f(x);
    x.data_mut()[i] = orig;
    (plus - minus) / (2.0 * h)
}

/// Sum of `out ⊙ weights`: turns a tensor-valued map into a scalar whose
/// gradient with respect to the output is `weights`.
pub fn dot(out: &Tensor<f64>, weights: &Tensor<f64>) -> f64 {
    out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

/// Result of comparing analytic gradients against central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel: f64,
    pub max_abs: f64,
}

/// ReLU masks and pooling selections of one forward pass.
pub struct Pattern {
    conv_masks: Vec<Vec<bool>>,
    argmax: Vec<Vec<usize>>,
    pooled_shapes: Vec<Vec<usize>>,
    hidden_mask: Vec<bool>,
}

pub fn activation_pattern(params: &NetworkParams<f64>, image: &Tensor<f64>) -> Pattern {
    let trace = forward(params, image).unwrap();
    Pattern {
        conv_masks: trace
            .conv_act
            .iter()
            .map(|a| a.data().iter().map(|&v| v > 0.0).collect())
            .collect(),
        argmax: trace.pools.iter().map(|p| p.argmax.clone()).collect(),
        pooled_shapes: trace.pools.iter().map(|p| p.output.shape().to_vec()).collect(),
        hidden_mask: trace.hidden.data().iter().map(|&v| v > 0.0).collect(),
    }
}

fn masked(t: Tensor<f64>, mask: &[bool]) -> Tensor<f64> {
    let data = t
        .data()
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { v } else { 0.0 })
        .collect();
    Tensor::new(t.shape(), data).unwrap()
}

/// Cross-entropy of the network restricted to a fixed activation pattern.
///
/// On that branch the loss is smooth in every parameter and its gradient is
/// exactly what backprop computes, so central differences carry no error
/// from ReLU or max-pool switching.
pub fn frozen_loss(params: &NetworkParams<f64>, image: &Tensor<f64>, label: usize, pat: &Pattern) -> f64 {
    let mut x = image.clone();
    for (l, layer) in params.conv.iter().enumerate() {
        let a = masked(
            conv2d_valid(&x, &layer.weights, &layer.bias).unwrap(),
            &pat.conv_masks[l],
        );
        let picked = pat.argmax[l].iter().map(|&i| a.data()[i]).collect();
        x = Tensor::new(&pat.pooled_shapes[l], picked).unwrap();
    }
    let flat = flatten(&x).unwrap();
    let hidden = masked(
        dense(&flat, &params.dense1.weights, &params.dense1.bias).unwrap(),
        &pat.hidden_mask,
    );
    let logits = dense(&hidden, &params.dense2.weights, &params.dense2.bias).unwrap();
    let max = logits.data().iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let log_sum = logits.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    log_sum - (logits.data()[label] - max)
}

/// Compare backprop with central differences of the batch-mean loss for
/// `per_layer` randomly chosen parameters of every layer (weights and bias
/// pooled), holding the activation pattern of the unperturbed pass fixed.
pub fn network_grad_check(
    params: &mut NetworkParams<f64>,
    batch: &[(Tensor<f64>, usize)],
    per_layer: usize,
    step: f64,
    floor: f64,
    seed: u64,
) -> GradCheck {
    network_grad_check_with(params, batch, per_layer, step, floor, seed, |_| {})
}

/// As [`network_grad_check`], with a hook that may alter the analytic
/// gradients before comparison.
pub fn network_grad_check_with(
    params: &mut NetworkParams<f64>,
    batch: &[(Tensor<f64>, usize)],
    per_layer: usize,
    step: f64,
    floor: f64,
    seed: u64,
    tamper: impl FnOnce(&mut Vec<Vec<f64>>),
) -> GradCheck {
    let view: Vec<(&Tensor<f64>, usize)> = batch.iter().map(|(t, l)| (t, *l)).collect();
    let analytic = batch_gradients(params, &view).unwrap().grads;
    let mut analytic: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.data().to_vec()).collect();
    tamper(&mut analytic);
    let patterns: Vec<Pattern> = batch.iter().map(|(img, _)| activation_pattern(params, img)).collect();
    let frozen_base: f64 = batch
        .iter()
        .zip(&patterns)
        .map(|((img, label), pat)| frozen_loss(params, img, *label, pat))
        .sum::<f64>()
        / batch.len() as f64;
    let real_base = batch_loss(params, &view).unwrap();
    assert!(
        (frozen_base - real_base).abs() < 1e-12,
        "frozen {frozen_base} vs {real_base}"
    );
    let mut r = rng(seed);
    let mut out = GradCheck {
        checked: 0,
        max_rel: 0.0,
        max_abs: 0.0,
    };
    for layer in 0..6 {
        let (wt, bt) = (2 * layer, 2 * layer + 1);
        let (nw, nb) = (analytic[wt].len(), analytic[bt].len());
        let amount = per_layer.min(nw + nb);
        for flat in sample(&mut r, nw + nb, amount) {
            let (t, i) = if flat < nw { (wt, flat) } else { (bt, flat - nw) };
            let orig = params.tensors()[t].data()[i];
            let mut eval_at = |v: f64| {
                params.tensors_mut()[t].data_mut()[i] = v;
                let total: f64 = batch
                    .iter()
                    .zip(&patterns)
                    .map(|((img, label), pat)| frozen_loss(params, img, *label, pat))
                    .sum();
                total / batch.len() as f64
            };
            let numeric = (eval_at(orig + step) - eval_at(orig - step)) / (2.0 * step);
            params.tensors_mut()[t].data_mut()[i] = orig;
            let a = analytic[t][i];
            out.max_rel = out.max_rel.max(rel_err(a, numeric, floor));
            out.max_abs = out.max_abs.max((a - numeric).abs());
            out.checked += 1;
        }
    }
    out
}

/// Random images in [0, 1] with labels cycling through the classes.
pub fn random_batch(side: usize, classes: usize, n: usize, seed: u64) -> Vec<(Tensor<f64>, usize)> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let img = Tensor::from_fn(&[side, side, 1], |_| r.random_range(0.0..1.0)).unwrap();
            (img, i % classes)
        })
        .collect()
}

/// Published per-class rows: name, TP, FP, FN (100 test images per class) and
/// the expected precision, recall and F1 at four decimals.
pub const TABLE_ROWS: [(&str, u64, u64, u64, [f64; 3]); 9] = [
    ("Felt", 100, 0, 0, [1.0, 1.0, 1.0]),
    ("Leather", 90, 8, 10, [0.9184, 0.9, 0.9091]),
    ("Suede", 96, 0, 4, [1.0, 0.96, 0.9796]),
    ("Cardstock", 91, 5, 9, [0.9479, 0.91, 0.9286]),
    ("Cardboard", 97, 9, 3, [0.9151, 0.97, 0.9417]),
    ("Matboard", 94, 7, 6, [0.9307, 0.94, 0.9353]),
    ("Aluminum", 85, 8, 15, [0.914, 0.85, 0.8808]),
    ("Stainless-steel", 100, 0, 0, [1.0, 1.0, 1.0]),
    ("Carbon Steel", 92, 15, 8, [0.8598, 0.92, 0.8889]),
];

/// Confusion matrix over the nine table classes plus an `other` class that
/// absorbs every misclassification the tables do not itemise.
pub fn table_confusion() -> speckle_core::ConfusionMatrix {
    let n = TABLE_ROWS.len() + 1;
    let other = n - 1;
    let mut rows = vec![vec![0u64; n]; n];
    for (i, &(_, tp, fp, fn_, _)) in TABLE_ROWS.iter().enumerate() {
        rows[i][i] = tp;
        rows[i][other] = fn_;
        rows[other][i] = fp;
    }
    rows[other][other] = 500;
    let mut names: Vec<String> = TABLE_ROWS.iter().map(|r| r.0.to_string()).collect();
    names.push("other".into());
    speckle_core::ConfusionMatrix::from_rows(names, &rows).unwrap()
}
