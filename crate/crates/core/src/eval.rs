//! Confusion matrices and per-class precision / recall / F1.
//!
//! Per-class metrics and accuracy are kept as exact integer ratios and
//! rounded half-up to four decimals only for display.

use std::fmt::{self, Write as _};
use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::Dataset;
use crate::model::{predict, ModelError, NetworkParams};
use crate::preprocess::LaserColor;

pub const DECIMALS: u32 = 4;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("true and predicted label lists differ in length ({truth} vs {predicted})")]
    LengthMismatch { truth: usize, predicted: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("confusion matrix is empty")]
    Empty,
    #[error("model has {model} classes but dataset has {dataset}")]
    ClassCount { model: usize, dataset: usize },
    #[error("model was trained with a {model} laser but data is configured for {data}; pass --force to override")]
    LaserMismatch { model: LaserColor, data: LaserColor },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Exact non-negative fraction; `0/0` reads as 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        Self { num, den }
    }

    pub fn value(self) -> f64 {
        if self.den == 0 {
            0.0
        } else {
            self.num as f64 / self.den as f64
        }
    }

    /// Half-up rounding to `DECIMALS` places, computed in integers.
    pub fn rounded(self) -> f64 {
        if self.den == 0 {
            return 0.0;
        }
        let scale = 10u128.pow(DECIMALS);
        let (n, d) = (self.num as u128, self.den as u128);
        let units = (2 * n * scale + d) / (2 * d);
        units as f64 / scale as f64
    }
}

/// Half-up rounding of a float to `DECIMALS` places.
pub fn round_half_up(x: f64) -> f64 {
    let scale = 10f64.powi(DECIMALS as i32);
    // nudge absorbs binary representation error at exact .5 boundaries
    ((x * scale) + 0.5 + 1e-9).floor() / scale
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
    pub class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn zeros(class_names: Vec<String>) -> Self {
        let n = class_names.len();
        Self {
            n,
            counts: vec![0; n * n],
            class_names,
        }
    }

    /// Build from explicit rows; every row must have `class_names.len()` cells.
    pub fn from_rows(class_names: Vec<String>, rows: &[Vec<u64>]) -> Result<Self, EvalError> {
        let mut cm = Self::zeros(class_names);
        if rows.len() != cm.n || rows.iter().any(|r| r.len() != cm.n) {
            return Err(EvalError::LengthMismatch {
                truth: cm.n,
                predicted: rows.len(),
            });
        }
        cm.counts = rows.concat();
        Ok(cm)
    }

    pub fn class_count(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n + predicted]
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<(), EvalError> {
        for label in [truth, predicted] {
            if label >= self.n {
                return Err(EvalError::LabelOutOfRange { label, classes: self.n });
            }
        }
        self.counts[truth * self.n + predicted] += 1;
        Ok(())
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.n..(truth + 1) * self.n]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.get(class, class)
    }

    pub fn false_positives(&self, class: usize) -> u64 {
        (0..self.n).filter(|&t| t != class).map(|t| self.get(t, class)).sum()
    }

    pub fn false_negatives(&self, class: usize) -> u64 {
        (0..self.n).filter(|&p| p != class).map(|p| self.get(class, p)).sum()
    }

    /// Plot-ready CSV: header row and first column hold class names.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\predicted");
        for name in &self.class_names {
            s.push(',');
            s.push_str(name);
        }
        s.push('\n');
        for (i, name) in self.class_names.iter().enumerate() {
            s.push_str(name);
            for v in self.row(i) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion(truth: &[usize], predicted: &[usize], class_names: Vec<String>) -> Result<ConfusionMatrix, EvalError> {
    if truth.len() != predicted.len() {
        return Err(EvalError::LengthMismatch {
            truth: truth.len(),
            predicted: predicted.len(),
        });
    }
    let mut cm = ConfusionMatrix::zeros(class_names);
    for (&t, &p) in truth.iter().zip(predicted) {
        cm.add(t, p)?;
    }
    Ok(cm)
}

/// Class names `class_0 .. class_{n-1}`.
pub fn default_class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class_{i}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: Ratio,
    pub recall: Ratio,
    pub f1: Ratio,
    pub support: u64,
}

/// `F1 = 2PR/(P+R) = 2TP/(2TP+FP+FN)`.
pub fn precision_recall_f1(cm: &ConfusionMatrix, class: usize) -> ClassMetrics {
    let tp = cm.true_positives(class);
    let fp = cm.false_positives(class);
    let fn_ = cm.false_negatives(class);
    ClassMetrics {
        precision: Ratio::new(tp, tp + fp),
        recall: Ratio::new(tp, tp + fn_),
        f1: Ratio::new(2 * tp, 2 * tp + fp + fn_),
        support: tp + fn_,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationReport {
    pub class_names: Vec<String>,
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: Ratio,
    /// Unweighted mean of per-class F1.
    pub macro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub samples: u64,
}

pub fn report(cm: &ConfusionMatrix) -> Result<ClassificationReport, EvalError> {
    if cm.class_count() == 0 || cm.total() == 0 {
        return Err(EvalError::Empty);
    }
    let per_class: Vec<ClassMetrics> = (0..cm.class_count()).map(|c| precision_recall_f1(cm, c)).collect();
    let n = per_class.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> Ratio| per_class.iter().map(|m| f(m).value()).sum::<f64>() / n;
    Ok(ClassificationReport {
        class_names: cm.class_names.clone(),
        macro_f1: mean(|m| m.f1),
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        per_class,
        accuracy: Ratio::new(cm.trace(), cm.total()),
        samples: cm.total(),
    })
}

impl ClassificationReport {
    /// `class,precision,recall,f1` rows followed by `macro avg` and `accuracy`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,precision,recall,f1\n");
        for (name, m) in self.class_names.iter().zip(&self.per_class) {
            let _ = writeln!(
                s,
                "{name},{:.4},{:.4},{:.4}",
                m.precision.rounded(),
                m.recall.rounded(),
                m.f1.rounded()
            );
        }
        let _ = writeln!(
            s,
            "macro avg,{:.4},{:.4},{:.4}",
            round_half_up(self.macro_precision),
            round_half_up(self.macro_recall),
            round_half_up(self.macro_f1)
        );
        let _ = writeln!(s, "accuracy,,,{:.4}", self.accuracy.rounded());
        s
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(self.to_csv().as_bytes())
    }
}

impl fmt::Display for ClassificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.class_names.iter().map(String::len).max().unwrap_or(0).max(9);
        writeln!(
            f,
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}",
            "class", "precision", "recall", "f1", "support"
        )?;
        for (name, m) in self.class_names.iter().zip(&self.per_class) {
            writeln!(
                f,
                "{name:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
                m.precision.rounded(),
                m.recall.rounded(),
                m.f1.rounded(),
                m.support
            )?;
        }
        writeln!(
            f,
            "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
            "macro avg",
            round_half_up(self.macro_precision),
            round_half_up(self.macro_recall),
            round_half_up(self.macro_f1),
            self.samples
        )?;
        write!(
            f,
            "{:<width$}  {:>9}  {:>9}  {:>9.4}  {:>7}",
            "accuracy",
            "",
            "",
            self.accuracy.rounded(),
            self.samples
        )
    }
}

pub fn check_laser(model: LaserColor, data: LaserColor, force: bool) -> Result<(), EvalError> {
    if model != data && !force {
        return Err(EvalError::LaserMismatch { model, data });
    }
    Ok(())
}

/// Predicted class for every sample, in dataset order.
pub fn predict_all(params: &NetworkParams<f32>, dataset: &Dataset) -> Result<Vec<usize>, EvalError> {
    let preds: Result<Vec<usize>, ModelError> = dataset
        .samples
        .par_iter()
        .map(|s| predict(params, &s.image).map(|(c, _)| c))
        .collect();
    Ok(preds?)
}

pub fn evaluate(
    params: &NetworkParams<f32>,
    dataset: &Dataset,
) -> Result<(ClassificationReport, ConfusionMatrix), EvalError> {
    if params.class_count() != dataset.class_count() {
        return Err(EvalError::ClassCount {
            model: params.class_count(),
            dataset: dataset.class_count(),
        });
    }
    let preds = predict_all(params, dataset)?;
    let truth: Vec<usize> = dataset.samples.iter().map(|s| s.label).collect();
    let cm = confusion(&truth, &preds, dataset.class_names.clone())?;
    Ok((report(&cm)?, cm))
}
