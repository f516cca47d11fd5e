//! Differentiable layer primitives on HWC tensors.
//!
//! Every function is pure. Backward passes take the forward inputs (or the
//! [`PoolTrace`]) and the upstream gradient and return exact analytic
//! gradients.

use crate::tensor::{Scalar, ShapeError, Tensor};

/// Kernel side of every convolution in the network.
pub const KERNEL: usize = 3;

/// Probability floor used by [`cross_entropy`]; bounds the loss at ~27.63.
pub const PROB_CLAMP: f64 = 1e-12;

fn dims3<T: Scalar>(t: &Tensor<T>, op: &'static str, what: &str) -> Result<(usize, usize, usize), ShapeError> {
    t.expect_rank(op, what, 3)?;
    let s = t.shape();
    Ok((s[0], s[1], s[2]))
}

struct ConvDims {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn patch_len(&self) -> usize {
        KERNEL * KERNEL * self.cin
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn conv_dims<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>) -> Result<ConvDims, ShapeError> {
    const OP: &str = "conv2d_valid";
    let (h, w, cin) = dims3(input, OP, "input")?;
    kernels.expect_rank(OP, "kernels", 4)?;
    let ks = kernels.shape();
    if ks[0] != KERNEL || ks[1] != KERNEL {
        return Err(ShapeError::mismatch(
            OP,
            format!("kernels must be 3x3, got {}x{}", ks[0], ks[1]),
        ));
    }
    if ks[2] != cin {
        return Err(ShapeError::mismatch(
            OP,
            format!("kernel input channels {} != input channels {}", ks[2], cin),
        ));
    }
    if h < KERNEL || w < KERNEL {
        return Err(ShapeError::mismatch(
            OP,
            format!("input {h}x{w} is smaller than the 3x3 kernel"),
        ));
    }
    Ok(ConvDims {
        h,
        w,
        cin,
        cout: ks[3],
        oh: h - KERNEL + 1,
        ow: w - KERNEL + 1,
    })
}

/// Lowers every 3×3×cin receptive field into one row, column order (dy, dx, ci).
fn im2col<T: Scalar>(input: &[T], d: &ConvDims) -> Vec<T> {
    let row_len = d.patch_len();
    let run = KERNEL * d.cin;
    let mut patches = vec![T::zero(); d.positions() * row_len];
    for y in 0..d.oh {
        for x in 0..d.ow {
            let row = &mut patches[(y * d.ow + x) * row_len..][..row_len];
            for dy in 0..KERNEL {
                // the three horizontal taps are contiguous in HWC layout
                let src = ((y + dy) * d.w + x) * d.cin;
                row[dy * run..(dy + 1) * run].copy_from_slice(&input[src..src + run]);
            }
        }
    }
    patches
}

fn col2im<T: Scalar>(patches: &[T], d: &ConvDims) -> Vec<T> {
    let row_len = d.patch_len();
    let run = KERNEL * d.cin;
    let mut out = vec![T::zero(); d.h * d.w * d.cin];
    for y in 0..d.oh {
        for x in 0..d.ow {
            let row = &patches[(y * d.ow + x) * row_len..][..row_len];
            for dy in 0..KERNEL {
                let dst = ((y + dy) * d.w + x) * d.cin;
                for (o, &g) in out[dst..dst + run].iter_mut().zip(&row[dy * run..(dy + 1) * run]) {
                    *o = *o + g;
                }
            }
        }
    }
    out
}

/// Valid (unpadded) stride-1 3×3 convolution, `[H,W,Cin] -> [H-2,W-2,Cout]`.
///
/// Implemented as patch-matrix multiplication.
pub fn conv2d_valid<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, ShapeError> {
    let d = conv_dims(input, kernels)?;
    if bias.shape() != [d.cout] {
        return Err(ShapeError::mismatch(
            "conv2d_valid",
            format!("bias shape {:?} != [{}]", bias.shape(), d.cout),
        ));
    }
    let patches = im2col(input.data(), &d);
    let mut out = Vec::with_capacity(d.positions() * d.cout);
    for _ in 0..d.positions() {
        out.extend_from_slice(bias.data());
    }
    T::gemm(
        d.positions(),
        d.patch_len(),
        d.cout,
        &patches,
        false,
        kernels.data(),
        false,
        &mut out,
        true,
    );
    Ok(Tensor::from_parts_unchecked(vec![d.oh, d.ow, d.cout], out))
}

/// Gradients of [`conv2d_valid`] with respect to its three arguments.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_valid_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<ConvGrads<T>, ShapeError> {
    let (gk, gb, gi) = conv_backward_impl(input, kernels, upstream, true)?;
    Ok(ConvGrads {
        input: gi.expect("input gradient requested"),
        kernels: gk,
        bias: gb,
    })
}

/// Kernel gradient, bias gradient and the optional input gradient.
pub(crate) type ConvBackward<T> = (Tensor<T>, Tensor<T>, Option<Tensor<T>>);

/// Shared backward; skips the input gradient when the caller does not need it
/// (first layer of the network).
pub(crate) fn conv_backward_impl<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    upstream: &Tensor<T>,
    want_input: bool,
) -> Result<ConvBackward<T>, ShapeError> {
    let d = conv_dims(input, kernels)?;
    if upstream.shape() != [d.oh, d.ow, d.cout] {
        return Err(ShapeError::mismatch(
            "conv2d_valid_backward",
            format!(
                "upstream shape {:?} != forward output [{}, {}, {}]",
                upstream.shape(),
                d.oh,
                d.ow,
                d.cout
            ),
        ));
    }
    let g = upstream.data();
    let patches = im2col(input.data(), &d);

    let mut grad_k = vec![T::zero(); d.patch_len() * d.cout];
    T::gemm(
        d.patch_len(),
        d.positions(),
        d.cout,
        &patches,
        true,
        g,
        false,
        &mut grad_k,
        false,
    );

    let mut grad_b = vec![T::zero(); d.cout];
    for row in g.chunks_exact(d.cout) {
        for (b, &v) in grad_b.iter_mut().zip(row) {
            *b = *b + v;
        }
    }

    let grad_i = if want_input {
        let mut grad_patches = patches;
        T::gemm(
            d.positions(),
            d.cout,
            d.patch_len(),
            g,
            false,
            kernels.data(),
            true,
            &mut grad_patches,
            false,
        );
        Some(Tensor::from_parts_unchecked(
            vec![d.h, d.w, d.cin],
            col2im(&grad_patches, &d),
        ))
    } else {
        None
    };

    Ok((
        Tensor::from_parts_unchecked(kernels.shape().to_vec(), grad_k),
        Tensor::from_parts_unchecked(vec![d.cout], grad_b),
        grad_i,
    ))
}

/// Output of a 2×2 max-pool plus the selected input element of every window.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolTrace<T> {
    pub output: Tensor<T>,
    /// Flat index into the pooled input, one per output element.
    pub argmax: Vec<usize>,
    pub input_shape: Vec<usize>,
}

/// Non-overlapping 2×2, stride 2 max-pool. Odd trailing rows/columns are
/// dropped; ties go to the first element in row-major window order.
pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<PoolTrace<T>, ShapeError> {
    let (h, w, c) = dims3(input, "maxpool2", "input")?;
    if h < 2 || w < 2 {
        return Err(ShapeError::mismatch(
            "maxpool2",
            format!("input {h}x{w} is smaller than the 2x2 window"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut argmax = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for x in 0..ow {
            let base = [
                ((2 * y) * w + 2 * x) * c,
                ((2 * y) * w + 2 * x + 1) * c,
                ((2 * y + 1) * w + 2 * x) * c,
                ((2 * y + 1) * w + 2 * x + 1) * c,
            ];
            for ch in 0..c {
                let mut best = base[0] + ch;
                for &b in &base[1..] {
                    if src[b + ch] > src[best] {
                        best = b + ch;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
    }
    Ok(PoolTrace {
        output: Tensor::from_parts_unchecked(vec![oh, ow, c], out),
        argmax,
        input_shape: vec![h, w, c],
    })
}

pub fn maxpool2_backward<T: Scalar>(trace: &PoolTrace<T>, upstream: &Tensor<T>) -> Result<Tensor<T>, ShapeError> {
    upstream.expect_same_shape("maxpool2_backward", &trace.output)?;
    let mut grad = vec![T::zero(); trace.input_shape.iter().product()];
    for (&idx, &g) in trace.argmax.iter().zip(upstream.data()) {
        grad[idx] = grad[idx] + g;
    }
    Ok(Tensor::from_parts_unchecked(trace.input_shape.clone(), grad))
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `upstream` where `input > 0`; the derivative at exactly 0 is 0.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>, ShapeError> {
    input.expect_same_shape("relu_backward", upstream)?;
    Ok(relu_mask(input.data(), upstream))
}

// Also valid with the relu *output* as mask since out > 0 iff in > 0.
pub(crate) fn relu_mask<T: Scalar>(mask: &[T], upstream: &Tensor<T>) -> Tensor<T> {
    let data = mask
        .iter()
        .zip(upstream.data())
        .map(|(&m, &g)| if m > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_parts_unchecked(upstream.shape().to_vec(), data)
}

fn dense_dims<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<(usize, usize), ShapeError> {
    input.expect_rank("dense", "input", 1)?;
    weights.expect_rank("dense", "weights", 2)?;
    let (n, m) = (weights.shape()[0], weights.shape()[1]);
    if input.len() != n {
        return Err(ShapeError::mismatch(
            "dense",
            format!("input length {} != weight rows {n}", input.len()),
        ));
    }
    Ok((n, m))
}

/// `out[j] = bias[j] + Σ_i input[i] · weights[i, j]`.
pub fn dense<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, ShapeError> {
    let (_, m) = dense_dims(input, weights)?;
    if bias.shape() != [m] {
        return Err(ShapeError::mismatch(
            "dense",
            format!("bias shape {:?} != [{m}]", bias.shape()),
        ));
    }
    let mut out = bias.data().to_vec();
    for (&x, row) in input.data().iter().zip(weights.data().chunks_exact(m)) {
        if x == T::zero() {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(row) {
            *o = *o + x * wv;
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![m], out))
}

#[derive(Debug, Clone)]
pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<DenseGrads<T>, ShapeError> {
    let (n, m) = dense_dims(input, weights)?;
    if upstream.shape() != [m] {
        return Err(ShapeError::mismatch(
            "dense_backward",
            format!("upstream shape {:?} != [{m}]", upstream.shape()),
        ));
    }
    let g = upstream.data();
    let mut gw = vec![T::zero(); n * m];
    let mut gi = vec![T::zero(); n];
    for (i, (&x, row)) in input.data().iter().zip(weights.data().chunks_exact(m)).enumerate() {
        if x != T::zero() {
            for (o, &gv) in gw[i * m..(i + 1) * m].iter_mut().zip(g) {
                *o = x * gv;
            }
        }
        gi[i] = row.iter().zip(g).fold(T::zero(), |acc, (&wv, &gv)| acc + wv * gv);
    }
    Ok(DenseGrads {
        input: Tensor::from_parts_unchecked(vec![n], gi),
        weights: Tensor::from_parts_unchecked(vec![n, m], gw),
        bias: upstream.clone(),
    })
}

/// Max-shifted softmax over a rank-1 tensor.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>, ShapeError> {
    logits.expect_rank("softmax", "logits", 1)?;
    let max = logits
        .data()
        .iter()
        .fold(T::neg_infinity(), |acc, &v| if v > acc { v } else { acc });
    let exps: Vec<T> = logits.data().iter().map(|&v| (v - max).exp()).collect();
    let total = exps.iter().fold(T::zero(), |acc, &v| acc + v);
    Ok(Tensor::from_parts_unchecked(
        logits.shape().to_vec(),
        exps.into_iter().map(|v| v / total).collect(),
    ))
}

fn onehot_class<T: Scalar>(probs: &Tensor<T>, onehot: &Tensor<T>, op: &'static str) -> Result<usize, ShapeError> {
    probs.expect_rank(op, "probabilities", 1)?;
    probs.expect_same_shape(op, onehot)?;
    let mut class = None;
    for (i, &v) in onehot.data().iter().enumerate() {
        if v == T::one() {
            if class.replace(i).is_some() {
                return Err(ShapeError::mismatch(op, "one-hot vector has more than one 1"));
            }
        } else if v != T::zero() {
            return Err(ShapeError::mismatch(
                op,
                format!("one-hot vector has entry {v} at index {i}"),
            ));
        }
    }
    class.ok_or_else(|| ShapeError::mismatch(op, "one-hot vector has no 1"))
}

/// `-ln(clamp(probs[true], 1e-12, 1))`.
pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, onehot: &Tensor<T>) -> Result<T, ShapeError> {
    let class = onehot_class(probs, onehot, "cross_entropy")?;
    Ok(xent_at(probs.data()[class]))
}

pub(crate) fn xent_at<T: Scalar>(p: T) -> T {
    let floor = T::from_f64_lossy(PROB_CLAMP);
    -p.max(floor).min(T::one()).ln()
}

/// Gradient of `cross_entropy(softmax(logits))` with respect to the logits.
pub fn softmax_xent_grad<T: Scalar>(probs: &Tensor<T>, onehot: &Tensor<T>) -> Result<Tensor<T>, ShapeError> {
    let class = onehot_class(probs, onehot, "softmax_xent_grad")?;
    let mut g = probs.clone();
    g.data_mut()[class] = g.data()[class] - T::one();
    Ok(g)
}

pub fn one_hot<T: Scalar>(class: usize, classes: usize) -> Result<Tensor<T>, ShapeError> {
    if class >= classes {
        return Err(ShapeError::mismatch(
            "one_hot",
            format!("class {class} out of range for {classes} classes"),
        ));
    }
    Tensor::from_fn(&[classes], |i| if i == class { T::one() } else { T::zero() })
}

/// Row-major flatten of an `[H,W,C]` tensor.
pub fn flatten<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>, ShapeError> {
    input.expect_rank("flatten", "input", 3)?;
    let n = input.len();
    Ok(Tensor::from_parts_unchecked(vec![n], input.data().to_vec()))
}
