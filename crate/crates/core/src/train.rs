//! Mini-batch Adamax training with per-epoch history and best-validation
//! checkpoint selection.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

use crate::dataset::{make_batches, Dataset, DatasetError};
use crate::model::{self, build_network, ModelError, NetworkParams};
use crate::optimizer::{AdamaxConfig, AdamaxState, OptimError};
use crate::preprocess::LaserColor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Training configuration; echoed into checkpoint metadata.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub data_dir: PathBuf,
    pub laser: LaserColor,
    pub input_side: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub out_path: PathBuf,
    pub history_path: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adamax = AdamaxConfig::default();
        Self {
            data_dir: PathBuf::new(),
            laser: LaserColor::Green,
            input_side: model::FULL_SIDE,
            epochs: 100,
            lr: adamax.lr,
            beta1: adamax.beta1,
            beta2: adamax.beta2,
            batch_size: 32,
            val_fraction: 0.2,
            seed: 0,
            out_path: PathBuf::from("model.spkl"),
            history_path: PathBuf::from("history.csv"),
        }
    }
}

impl TrainConfig {
    pub fn adamax(&self) -> AdamaxConfig {
        AdamaxConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamaxConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(TrainError::Config(format!(
                "validation fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        self.adamax()
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        model::spatial_chain(self.input_side).map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    /// `None` when training without a validation split.
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc";

/// History as CSV (`epoch,train_loss,train_acc,val_loss,val_acc`).
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    for r in history {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{},{}",
            r.epoch,
            r.train_loss,
            r.train_acc,
            opt(r.val_loss),
            opt(r.val_acc)
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy (lowest
    /// validation loss on ties); the final epoch without validation data.
    pub best: NetworkParams<f32>,
    pub best_epoch: usize,
    pub last: NetworkParams<f32>,
    pub history: Vec<EpochRecord>,
}

/// Mean loss and accuracy over a dataset without updating anything.
pub fn measure(params: &NetworkParams<f32>, ds: &Dataset) -> Result<(f64, f64), ModelError> {
    use rayon::prelude::*;
    let per_sample: Result<Vec<(f64, bool)>, ModelError> = ds
        .samples
        .par_iter()
        .map(|s| {
            let probs = model::forward(params, &s.image)?.probs;
            let loss = crate::ops::xent_at(probs.data()[s.label]) as f64;
            Ok((loss, model::argmax_lowest(probs.data()).0 == s.label))
        })
        .collect();
    let per_sample = per_sample?;
    let n = per_sample.len().max(1) as f64;
    let loss = per_sample.iter().map(|p| p.0).sum::<f64>() / n;
    let acc = per_sample.iter().filter(|p| p.1).count() as f64 / n;
    Ok((loss, acc))
}

/// Seed for the batch order of `epoch` (1-based).
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64)
}

/// Train a fresh network on `train`; `val` drives best-epoch selection.
///
/// Training loss and accuracy per epoch are averaged over the batches as
/// they are processed.
pub fn train(
    config: &TrainConfig,
    train: &Dataset,
    val: Option<&Dataset>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    if train.side != config.input_side {
        return Err(TrainError::Config(format!(
            "dataset side {} differs from network input side {}",
            train.side, config.input_side
        )));
    }
    let mut params = build_network(config.input_side, train.class_count(), config.seed)?;
    let mut opt = AdamaxState::new(&params, config.adamax());
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(NetworkParams<f32>, usize, f64, f64)> = None;

    for epoch in 1..=config.epochs {
        let batches = make_batches(train.len(), config.batch_size, epoch_seed(config.seed, epoch))?;
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for idx in &batches {
            let batch = train.batch(idx);
            let out = model::batch_gradients(&params, &batch)?;
            loss_sum += out.mean_loss as f64 * idx.len() as f64;
            correct += out.correct;
            opt.step(&mut params, &out.grads)?;
        }
        let n = train.len() as f64;
        let (val_loss, val_acc) = match val.filter(|v| !v.is_empty()) {
            Some(v) => {
                let (l, a) = measure(&params, v)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_loss,
            val_acc,
        };
        on_epoch(&record);
        history.push(record);

        if let (Some(l), Some(a)) = (val_loss, val_acc) {
            let better = match &best {
                None => true,
                Some((_, _, bl, ba)) => a > *ba || (a == *ba && l < *bl),
            };
            if better {
                best = Some((params.clone(), epoch, l, a));
            }
        }
    }

    let (best, best_epoch) = match best {
        Some((p, e, _, _)) => (p, e),
        None => (params.clone(), config.epochs),
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: params,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documentation() {
        let c = TrainConfig::default();
        assert_eq!(c.epochs, 100);
        assert_eq!(c.lr, 0.001);
        assert_eq!((c.beta1, c.beta2), (0.9, 0.999));
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.val_fraction, 0.2);
        assert_eq!(c.input_side, 256);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn invalid_configs() {
        let base = TrainConfig::default();
        for bad in [
            TrainConfig {
                epochs: 0,
                ..base.clone()
            },
            TrainConfig {
                lr: 0.0,
                ..base.clone()
            },
            TrainConfig {
                batch_size: 0,
                ..base.clone()
            },
            TrainConfig {
                val_fraction: 1.0,
                ..base.clone()
            },
            TrainConfig {
                input_side: 40,
                ..base.clone()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn history_format() {
        let h = [
            EpochRecord {
                epoch: 1,
                train_loss: 2.0,
                train_acc: 0.5,
                val_loss: Some(1.5),
                val_acc: Some(0.25),
            },
            EpochRecord {
                epoch: 2,
                train_loss: 1.0,
                train_acc: 0.75,
                val_loss: None,
                val_acc: None,
            },
        ];
        assert_eq!(
            history_csv(&h),
            "epoch,train_loss,train_acc,val_loss,val_acc\n\
             1,2.000000,0.500000,1.500000,0.250000\n\
             2,1.000000,0.750000,,\n"
        );
    }
}
