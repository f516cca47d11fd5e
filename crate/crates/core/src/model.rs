//! The fixed four-conv / two-dense speckle classifier.
//!
//! Topology for an `S×S×1` input (valid 3×3 convolutions, 2×2 pooling):
//!
//! ```text
//! conv 32 -> relu -> pool -> conv 64 -> relu -> pool
//!   -> conv 128 -> relu -> pool -> conv 128 -> relu -> pool
//!   -> flatten -> dense 512 -> relu -> dense C -> softmax
//! ```
//!
//! For `S = 256` the spatial sides are 254, 127, 125, 62, 60, 30, 28, 14 and
//! the network has 13,101,214 parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::ops::{self, PoolTrace};
use crate::tensor::{Scalar, ShapeError, Tensor};

pub const CONV_CHANNELS: [usize; 4] = [32, 64, 128, 128];
pub const HIDDEN_UNITS: usize = 512;
pub const DEFAULT_CLASSES: usize = 30;
/// Smallest input side for which every stage keeps a side of at least 1.
pub const MIN_INPUT_SIDE: usize = 46;
pub const FULL_SIDE: usize = 256;
pub const TINY_SIDE: usize = 64;

/// Names of the parameter tensors in storage order.
pub const TENSOR_NAMES: [&str; 12] = [
    "conv1.kernels",
    "conv1.bias",
    "conv2.kernels",
    "conv2.bias",
    "conv3.kernels",
    "conv3.bias",
    "conv4.kernels",
    "conv4.bias",
    "dense1.weights",
    "dense1.bias",
    "dense2.weights",
    "dense2.bias",
];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input side {side} is too small for the conv/pool chain (minimum {MIN_INPUT_SIDE})")]
    InputTooSmall { side: usize },
    #[error("class count must be at least 1")]
    NoClasses,
    #[error("image shape {actual:?} does not match the network input [{side}, {side}, 1]")]
    ImageShape { actual: Vec<usize>, side: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Spatial side after each of the eight conv/pool stages.
pub fn spatial_chain(input_side: usize) -> Result<[usize; 8], ModelError> {
    let mut sides = [0usize; 8];
    let mut s = input_side;
    for stage in 0..4 {
        if s < ops::KERNEL {
            return Err(ModelError::InputTooSmall { side: input_side });
        }
        s -= ops::KERNEL - 1;
        sides[2 * stage] = s;
        if s < 2 {
            return Err(ModelError::InputTooSmall { side: input_side });
        }
        s /= 2;
        sides[2 * stage + 1] = s;
    }
    Ok(sides)
}

/// Length of the flattened last feature map.
pub fn flatten_dim(input_side: usize) -> Result<usize, ModelError> {
    let last = spatial_chain(input_side)?[7];
    Ok(last * last * CONV_CHANNELS[3])
}

/// Shapes of the twelve parameter tensors, in [`TENSOR_NAMES`] order.
pub fn param_shapes(input_side: usize, class_count: usize) -> Result<Vec<Vec<usize>>, ModelError> {
    if class_count == 0 {
        return Err(ModelError::NoClasses);
    }
    let flat = flatten_dim(input_side)?;
    let mut shapes = Vec::with_capacity(12);
    let mut cin = 1;
    for &cout in &CONV_CHANNELS {
        shapes.push(vec![3, 3, cin, cout]);
        shapes.push(vec![cout]);
        cin = cout;
    }
    shapes.push(vec![flat, HIDDEN_UNITS]);
    shapes.push(vec![HIDDEN_UNITS]);
    shapes.push(vec![HIDDEN_UNITS, class_count]);
    shapes.push(vec![class_count]);
    Ok(shapes)
}

pub fn param_count_for(input_side: usize, class_count: usize) -> Result<usize, ModelError> {
    Ok(param_shapes(input_side, class_count)?
        .iter()
        .map(|s| s.iter().product::<usize>())
        .sum())
}

/// Weights and biases of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Parameters of the whole network. Also used to hold gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T = f32> {
    pub conv: [Layer<T>; 4],
    pub dense1: Layer<T>,
    pub dense2: Layer<T>,
    input_side: usize,
    class_count: usize,
}

impl<T: Scalar> NetworkParams<T> {
    /// Assemble from tensors in [`TENSOR_NAMES`] order, validating every shape.
    pub fn from_tensors(input_side: usize, class_count: usize, tensors: Vec<Tensor<T>>) -> Result<Self, ModelError> {
        let shapes = param_shapes(input_side, class_count)?;
        if tensors.len() != shapes.len() {
            return Err(ShapeError::mismatch(
                "network",
                format!("expected {} tensors, got {}", shapes.len(), tensors.len()),
            )
            .into());
        }
        for ((t, s), name) in tensors.iter().zip(&shapes).zip(TENSOR_NAMES) {
            if t.shape() != s.as_slice() {
                return Err(ShapeError::mismatch(
                    "network",
                    format!("{name} has shape {:?}, expected {:?}", t.shape(), s),
                )
                .into());
            }
        }
        let mut it = tensors.into_iter();
        let mut layer = || Layer {
            weights: it.next().expect("length checked"),
            bias: it.next().expect("length checked"),
        };
        let conv = [layer(), layer(), layer(), layer()];
        let dense1 = layer();
        let dense2 = layer();
        Ok(Self {
            conv,
            dense1,
            dense2,
            input_side,
            class_count,
        })
    }

    pub fn zeros(input_side: usize, class_count: usize) -> Result<Self, ModelError> {
        let tensors = param_shapes(input_side, class_count)?
            .iter()
            .map(|s| Tensor::zeros(s))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_tensors(input_side, class_count, tensors)
    }

    /// Glorot-uniform weights, zero biases; deterministic per seed.
    ///
    /// Samples are drawn in f64 and rounded, so f32 and f64 networks built
    /// from the same seed agree to f32 precision.
    pub fn glorot(input_side: usize, class_count: usize, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(input_side, class_count)?;
        for layer in params.layers_mut() {
            let shape = layer.weights.shape().to_vec();
            let (fan_in, fan_out) = match shape.as_slice() {
                [kh, kw, cin, cout] => (kh * kw * cin, kh * kw * cout),
                [n, m] => (*n, *m),
                _ => unreachable!("weights are rank 2 or 4"),
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in layer.weights.data_mut() {
                *w = T::from_f64_lossy(rng.random_range(-limit..limit));
            }
        }
        Ok(params)
    }

    pub fn input_side(&self) -> usize {
        self.input_side
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn layers(&self) -> [&Layer<T>; 6] {
        let [c1, c2, c3, c4] = &self.conv;
        [c1, c2, c3, c4, &self.dense1, &self.dense2]
    }

    pub fn layers_mut(&mut self) -> [&mut Layer<T>; 6] {
        let [c1, c2, c3, c4] = &mut self.conv;
        [c1, c2, c3, c4, &mut self.dense1, &mut self.dense2]
    }

    /// All twelve tensors in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers().into_iter().flat_map(|l| [&l.weights, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        let tensors = self.tensors().into_iter().map(|t| t.cast()).collect();
        NetworkParams::from_tensors(self.input_side, self.class_count, tensors).expect("same topology")
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<(), ShapeError> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            t.scale(factor);
        }
    }

    pub fn same_topology(&self, other: &Self) -> bool {
        self.input_side == other.input_side && self.class_count == other.class_count
    }
}

/// Builds a fresh float32 network.
pub fn build_network(input_side: usize, class_count: usize, seed: u64) -> Result<NetworkParams<f32>, ModelError> {
    NetworkParams::glorot(input_side, class_count, seed)
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    pub input: Tensor<T>,
    /// Post-ReLU output of each convolution.
    pub conv_act: Vec<Tensor<T>>,
    pub pools: Vec<PoolTrace<T>>,
    pub flat: Tensor<T>,
    /// Post-ReLU hidden layer.
    pub hidden: Tensor<T>,
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    /// Spatial side of every conv and pool output, in order.
    pub fn spatial_sides(&self) -> Vec<usize> {
        self.conv_act
            .iter()
            .zip(&self.pools)
            .flat_map(|(c, p)| [c.shape()[0], p.output.shape()[0]])
            .collect()
    }
}

fn check_image<T: Scalar>(params: &NetworkParams<T>, image: &Tensor<T>) -> Result<(), ModelError> {
    let side = params.input_side;
    if image.shape() != [side, side, 1] {
        return Err(ModelError::ImageShape {
            actual: image.shape().to_vec(),
            side,
        });
    }
    Ok(())
}

pub fn forward<T: Scalar>(params: &NetworkParams<T>, image: &Tensor<T>) -> Result<ForwardTrace<T>, ModelError> {
    check_image(params, image)?;
    let mut conv_act = Vec::with_capacity(4);
    let mut pools: Vec<PoolTrace<T>> = Vec::with_capacity(4);
    for layer in &params.conv {
        let x = pools.last().map_or(image, |p| &p.output);
        let act = ops::relu(&ops::conv2d_valid(x, &layer.weights, &layer.bias)?);
        pools.push(ops::maxpool2(&act)?);
        conv_act.push(act);
    }
    let flat = ops::flatten(&pools[3].output)?;
    let hidden = ops::relu(&ops::dense(&flat, &params.dense1.weights, &params.dense1.bias)?);
    let logits = ops::dense(&hidden, &params.dense2.weights, &params.dense2.bias)?;
    let probs = ops::softmax(&logits)?;
    Ok(ForwardTrace {
        input: image.clone(),
        conv_act,
        pools,
        flat,
        hidden,
        logits,
        probs,
    })
}

/// Gradients of one sample's loss given the logit gradient.
pub fn backward<T: Scalar>(
    params: &NetworkParams<T>,
    trace: &ForwardTrace<T>,
    logit_grad: &Tensor<T>,
) -> Result<NetworkParams<T>, ModelError> {
    let mut grads = Vec::with_capacity(12);

    let d2 = ops::dense_backward(&trace.hidden, &params.dense2.weights, logit_grad)?;
    let g_hidden = ops::relu_mask(trace.hidden.data(), &d2.input);
    let d1 = ops::dense_backward(&trace.flat, &params.dense1.weights, &g_hidden)?;

    let mut g = d1.input.reshape(trace.pools[3].output.shape())?;
    let mut conv_grads = Vec::with_capacity(4);
    for i in (0..4).rev() {
        let g_act = ops::maxpool2_backward(&trace.pools[i], &g)?;
        let g_pre = ops::relu_mask(trace.conv_act[i].data(), &g_act);
        let x = if i == 0 {
            &trace.input
        } else {
            &trace.pools[i - 1].output
        };
        let (gk, gb, gi) = ops::conv_backward_impl(x, &params.conv[i].weights, &g_pre, i > 0)?;
        conv_grads.push((gk, gb));
        if let Some(gi) = gi {
            g = gi;
        }
    }
    for (gk, gb) in conv_grads.into_iter().rev() {
        grads.push(gk);
        grads.push(gb);
    }
    grads.extend([d1.weights, d1.bias, d2.weights, d2.bias]);
    NetworkParams::from_tensors(params.input_side, params.class_count, grads)
}

/// Mean loss, summed gradients scaled to the mean, and the number of
/// correctly classified samples of a batch.
#[derive(Debug, Clone)]
pub struct BatchOutcome<T> {
    pub mean_loss: T,
    pub grads: NetworkParams<T>,
    pub correct: usize,
}

struct SampleOutcome<T> {
    loss: T,
    grads: NetworkParams<T>,
    correct: bool,
}

fn sample_gradients<T: Scalar>(
    params: &NetworkParams<T>,
    image: &Tensor<T>,
    label: usize,
) -> Result<SampleOutcome<T>, ModelError> {
    let classes = params.class_count;
    if label >= classes {
        return Err(ModelError::Label { label, classes });
    }
    let trace = forward(params, image)?;
    let onehot = ops::one_hot(label, classes)?;
    let loss = ops::cross_entropy(&trace.probs, &onehot)?;
    let logit_grad = ops::softmax_xent_grad(&trace.probs, &onehot)?;
    let grads = backward(params, &trace, &logit_grad)?;
    Ok(SampleOutcome {
        loss,
        grads,
        correct: argmax_lowest(trace.probs.data()).0 == label,
    })
}

/// Batch-mean cross-entropy and its gradient.
///
/// Samples are processed in parallel in windows, but gradients are summed
/// strictly in sample order, so the result is bit-identical for any thread
/// count.
pub fn batch_gradients<T: Scalar>(
    params: &NetworkParams<T>,
    batch: &[(&Tensor<T>, usize)],
) -> Result<BatchOutcome<T>, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let window = rayon::current_num_threads().max(1);
    let mut total: Option<NetworkParams<T>> = None;
    let mut loss_sum = T::zero();
    let mut correct = 0;
    for chunk in batch.chunks(window) {
        let outcomes: Vec<_> = chunk
            .par_iter()
            .map(|&(img, label)| sample_gradients(params, img, label))
            .collect();
        for o in outcomes {
            let o = o?;
            loss_sum = loss_sum + o.loss;
            correct += o.correct as usize;
            match total.as_mut() {
                None => total = Some(o.grads),
                Some(t) => t.add_assign(&o.grads)?,
            }
        }
    }
    let n = T::from_usize(batch.len()).expect("batch size fits the scalar type");
    let mut grads = total.expect("non-empty batch");
    grads.scale(T::one() / n);
    Ok(BatchOutcome {
        mean_loss: loss_sum / n,
        grads,
        correct,
    })
}

/// Batch-mean loss and its exact gradient.
pub fn loss_and_gradients<T: Scalar>(
    params: &NetworkParams<T>,
    batch: &[(&Tensor<T>, usize)],
) -> Result<(T, NetworkParams<T>), ModelError> {
    let out = batch_gradients(params, batch)?;
    Ok((out.mean_loss, out.grads))
}

/// Batch-mean loss only.
pub fn batch_loss<T: Scalar>(params: &NetworkParams<T>, batch: &[(&Tensor<T>, usize)]) -> Result<T, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut sum = T::zero();
    for &(img, label) in batch {
        if label >= params.class_count {
            return Err(ModelError::Label {
                label,
                classes: params.class_count,
            });
        }
        let probs = forward(params, img)?.probs;
        sum = sum + ops::xent_at(probs.data()[label]);
    }
    Ok(sum / T::from_usize(batch.len()).expect("batch size fits"))
}

/// Index and value of the maximum; ties go to the lowest index.
pub fn argmax_lowest<T: Scalar>(values: &[T]) -> (usize, T) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    (best, values[best])
}

/// Most probable class and its probability.
pub fn predict<T: Scalar>(params: &NetworkParams<T>, image: &Tensor<T>) -> Result<(usize, T), ModelError> {
    let trace = forward(params, image)?;
    Ok(argmax_lowest(trace.probs.data()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts() {
        assert_eq!(param_count_for(256, 30).unwrap(), 13_101_214);
        assert_eq!(param_count_for(64, 30).unwrap(), 518_302);
        assert_eq!(flatten_dim(256).unwrap(), 25_088);
        assert_eq!(flatten_dim(64).unwrap(), 512);
        assert_eq!(flatten_dim(46).unwrap(), 128);
    }

    #[test]
    fn chain_and_minimum_side() {
        assert_eq!(spatial_chain(256).unwrap(), [254, 127, 125, 62, 60, 30, 28, 14]);
        assert_eq!(spatial_chain(46).unwrap(), [44, 22, 20, 10, 8, 4, 2, 1]);
        for side in 0..MIN_INPUT_SIDE {
            assert!(
                matches!(spatial_chain(side), Err(ModelError::InputTooSmall { .. })),
                "side {side}"
            );
        }
        let err = build_network(45, 30, 0).unwrap_err();
        assert!(err.to_string().contains("minimum 46"), "{err}");
        assert!(matches!(build_network(64, 0, 0), Err(ModelError::NoClasses)));
    }

    #[test]
    fn glorot_bounds_and_determinism() {
        let a = build_network(46, 5, 7).unwrap();
        let b = build_network(46, 5, 7).unwrap();
        let c = build_network(46, 5, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for layer in a.layers() {
            assert!(layer.bias.data().iter().all(|&v| v == 0.0));
            let s = layer.weights.shape();
            let (fi, fo) = if s.len() == 4 {
                (9 * s[2], 9 * s[3])
            } else {
                (s[0], s[1])
            };
            let limit = (6.0 / (fi + fo) as f64).sqrt() as f32;
            assert!(layer.weights.data().iter().all(|w| w.abs() <= limit));
        }
    }

    #[test]
    fn zero_image_gives_uniform_probs() {
        let p = build_network(64, 30, 1).unwrap();
        let img = Tensor::zeros(&[64, 64, 1]).unwrap();
        let trace = forward(&p, &img).unwrap();
        for &v in trace.probs.data() {
            assert!((v - 1.0 / 30.0).abs() < 1e-6);
        }
        assert_eq!(trace.spatial_sides(), vec![62, 31, 29, 14, 12, 6, 4, 2]);
        assert_eq!(trace.flat.len(), 512);
        assert_eq!(predict(&p, &img).unwrap().0, 0);
    }

    #[test]
    fn forward_rejects_wrong_image() {
        let p = build_network(46, 3, 1).unwrap();
        let img = Tensor::zeros(&[48, 48, 1]).unwrap();
        assert!(matches!(forward(&p, &img), Err(ModelError::ImageShape { .. })));
    }

    #[test]
    fn empty_batch_and_bad_label() {
        let p = build_network(46, 3, 1).unwrap();
        assert!(matches!(loss_and_gradients(&p, &[]), Err(ModelError::EmptyBatch)));
        let img = Tensor::zeros(&[46, 46, 1]).unwrap();
        assert!(matches!(
            loss_and_gradients(&p, &[(&img, 3)]),
            Err(ModelError::Label { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax_lowest(&[0.25f32, 0.25, 0.5, 0.5]).0, 2);
        assert_eq!(argmax_lowest(&[1.0f32, 1.0]).0, 0);
    }
}
