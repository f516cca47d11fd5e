//! Adamax: Adam with an exponentially weighted infinity norm in place of the
//! second moment.
//!
//! ```text
//! t <- t + 1
//! m <- beta1 * m + (1 - beta1) * g
//! u <- max(beta2 * u, |g|)
//! theta <- theta - (lr / (1 - beta1^t)) * m / (u + eps)
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::NetworkParams;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("gradient set has {grads} tensors but parameters have {params}")]
    TensorCount { params: usize, grads: usize },
    #[error("tensor {index}: gradient shape {grad:?} does not match parameter shape {param:?}")]
    Shape {
        index: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("tensor {index}: non-finite gradient value")]
    NonFinite { index: usize },
    #[error("invalid hyperparameter: {0}")]
    Hyper(String),
}

/// Hyperparameters. `lr = 0.001`, `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamaxConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamaxConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamaxConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(OptimError::Hyper(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(OptimError::Hyper(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(OptimError::Hyper(format!(
                "epsilon must be non-negative, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Anything that exposes an ordered list of parameter tensors.
pub trait ParamSet<T> {
    fn param_tensors(&self) -> Vec<&Tensor<T>>;
    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<T>>;
}

impl<T: Scalar> ParamSet<T> for NetworkParams<T> {
    fn param_tensors(&self) -> Vec<&Tensor<T>> {
        self.tensors()
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.tensors_mut()
    }
}

impl<T> ParamSet<T> for Vec<Tensor<T>> {
    fn param_tensors(&self) -> Vec<&Tensor<T>> {
        self.iter().collect()
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.iter_mut().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamaxState<T = f32> {
    pub m: Vec<Tensor<T>>,
    pub u: Vec<Tensor<T>>,
    pub t: u64,
    pub config: AdamaxConfig,
}

impl<T: Scalar> AdamaxState<T> {
    /// Zero moments shaped like `params`.
    pub fn new(params: &impl ParamSet<T>, config: AdamaxConfig) -> Self {
        let zeros: Vec<Tensor<T>> = params.param_tensors().iter().map(|t| t.zeros_like()).collect();
        Self {
            m: zeros.clone(),
            u: zeros,
            t: 0,
            config,
        }
    }

    /// One update. Validates every gradient before touching anything, so an
    /// error leaves both parameters and state unchanged.
    pub fn step(&mut self, params: &mut impl ParamSet<T>, grads: &impl ParamSet<T>) -> Result<(), OptimError> {
        self.config.validate()?;
        let grads = grads.param_tensors();
        let mut params = params.param_tensors_mut();
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(OptimError::TensorCount {
                params: params.len(),
                grads: grads.len(),
            });
        }
        for (index, (p, g)) in params.iter().zip(&grads).enumerate() {
            if p.shape() != g.shape() || self.m[index].shape() != p.shape() {
                return Err(OptimError::Shape {
                    index,
                    param: p.shape().to_vec(),
                    grad: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(OptimError::NonFinite { index });
            }
        }

        self.t += 1;
        let c = self.config;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one_minus_b1 = T::from_f64_lossy(1.0 - c.beta1);
        let eps = T::from_f64_lossy(c.epsilon);
        let step_size = T::from_f64_lossy(c.lr / (1.0 - c.beta1.powf(self.t as f64)));

        for ((p, g), (m, u)) in params
            .iter_mut()
            .zip(&grads)
            .zip(self.m.iter_mut().zip(self.u.iter_mut()))
        {
            let values = p.data_mut().iter_mut().zip(g.data());
            for ((theta, &gv), (mv, uv)) in values.zip(m.data_mut().iter_mut().zip(u.data_mut())) {
                *mv = b1 * *mv + one_minus_b1 * gv;
                *uv = (b2 * *uv).max(gv.abs());
                *theta = *theta - step_size * *mv / (*uv + eps);
            }
        }
        Ok(())
    }
}

pub fn adamax_init<T: Scalar>(params: &impl ParamSet<T>) -> AdamaxState<T> {
    AdamaxState::new(params, AdamaxConfig::default())
}
