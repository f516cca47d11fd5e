//! Python bindings: `import speckle`.
//!
//! Images cross the boundary as `(width, height, bytes)` with interleaved
//! 8-bit RGB, and tensors as flat lists of floats in row-major order.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use speckle_core::checkpoint::{self, CheckpointError, CheckpointMeta};
use speckle_core::dataset::{self, ScanOptions};
use speckle_core::eval;
use speckle_core::image_io;
use speckle_core::model::{self, NetworkParams};
use speckle_core::preprocess::{self, LaserColor, PreprocessOptions, RawImage};
use speckle_core::synth;
use speckle_core::tensor::Tensor;
use speckle_core::train::{self, TrainConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn laser(name: &str) -> PyResult<LaserColor> {
    name.parse().map_err(value_err)
}

fn raw_image(width: usize, height: usize, data: &[u8]) -> PyResult<RawImage> {
    RawImage::new(width, height, data.to_vec()).map_err(value_err)
}

/// Trainable parameter count of the network for a given input side and class count.
#[pyfunction]
#[pyo3(signature = (side = model::FULL_SIDE, classes = model::DEFAULT_CLASSES))]
fn param_count(side: usize, classes: usize) -> PyResult<usize> {
    model::param_count_for(side, classes).map_err(value_err)
}

/// Spatial side after each conv and pool stage.
#[pyfunction]
fn spatial_chain(side: usize) -> PyResult<Vec<usize>> {
    Ok(model::spatial_chain(side).map_err(value_err)?.to_vec())
}

/// Laser channel of an RGB image, resized and scaled to `[0, 1]`.
#[pyfunction]
#[pyo3(signature = (width, height, data, laser_color = "green", side = model::FULL_SIDE, crop_center = false))]
fn preprocess_rgb(
    width: usize,
    height: usize,
    data: &[u8],
    laser_color: &str,
    side: usize,
    crop_center: bool,
) -> PyResult<Vec<f32>> {
    let opts = PreprocessOptions {
        laser: laser(laser_color)?,
        side,
        crop_center,
    };
    let t = preprocess::preprocess_with(&raw_image(width, height, data)?, &opts).map_err(value_err)?;
    Ok(t.into_data())
}

/// Decode a PPM or PNG file into `(width, height, rgb_bytes)`.
#[pyfunction]
fn load_image<'py>(py: Python<'py>, path: PathBuf) -> PyResult<(usize, usize, Bound<'py, PyBytes>)> {
    let img = image_io::load_image(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
    Ok((img.width(), img.height(), PyBytes::new(py, img.data())))
}

/// One 8-bit speckle plane, `grid × grid` bytes.
#[pyfunction]
#[pyo3(signature = (grid, mask_radius, contrast = 1.0, background = 128.0, seed = 0))]
fn synth_speckle<'py>(
    py: Python<'py>,
    grid: usize,
    mask_radius: f64,
    contrast: f64,
    background: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyBytes>> {
    let plane = synth::synth_speckle(&synth::SpeckleParams {
        grid,
        mask_radius,
        contrast,
        background,
        seed,
    })
    .map_err(value_err)?;
    Ok(PyBytes::new(py, &plane.data))
}

/// Write a class-per-folder synthetic dataset; returns the number of images.
#[pyfunction]
#[pyo3(signature = (out_dir, classes = 8, per_class = 50, side = 64, laser_color = "green", seed = 0))]
fn synth_dataset(
    out_dir: PathBuf,
    classes: usize,
    per_class: usize,
    side: usize,
    laser_color: &str,
    seed: u64,
) -> PyResult<usize> {
    let rows = synth::synth_dataset(&synth::SynthConfig {
        class_count: classes,
        per_class,
        side,
        out_dir,
        laser: laser(laser_color)?,
        seed,
    })
    .map_err(value_err)?;
    Ok(rows.len())
}

/// Confusion matrix rows (truth) by columns (prediction).
#[pyfunction]
fn confusion_matrix(truth: Vec<usize>, predicted: Vec<usize>, classes: usize) -> PyResult<Vec<Vec<u64>>> {
    let cm = eval::confusion(&truth, &predicted, eval::default_class_names(classes)).map_err(value_err)?;
    Ok((0..classes).map(|k| cm.row(k).to_vec()).collect())
}

/// Per-class precision, recall, F1 and support plus accuracy and macro-F1.
#[pyfunction]
#[pyo3(signature = (truth, predicted, class_names))]
fn classification_report<'py>(
    py: Python<'py>,
    truth: Vec<usize>,
    predicted: Vec<usize>,
    class_names: Vec<String>,
) -> PyResult<Bound<'py, PyDict>> {
    let cm = eval::confusion(&truth, &predicted, class_names).map_err(value_err)?;
    let r = eval::report(&cm).map_err(value_err)?;
    let out = PyDict::new(py);
    let classes = PyDict::new(py);
    for (name, m) in r.class_names.iter().zip(&r.per_class) {
        let row = PyDict::new(py);
        row.set_item("precision", m.precision.value())?;
        row.set_item("recall", m.recall.value())?;
        row.set_item("f1", m.f1.value())?;
        row.set_item("support", m.support)?;
        classes.set_item(name, row)?;
    }
    out.set_item("classes", classes)?;
    out.set_item("accuracy", r.accuracy.value())?;
    out.set_item("macro_f1", r.macro_f1)?;
    out.set_item("macro_precision", r.macro_precision)?;
    out.set_item("macro_recall", r.macro_recall)?;
    Ok(out)
}

/// The classifier: weights plus the labels and laser color it was trained with.
#[pyclass(module = "speckle")]
struct Network {
    params: NetworkParams<f32>,
    meta: CheckpointMeta,
}

impl Network {
    fn image_tensor(&self, pixels: Vec<f32>) -> PyResult<Tensor<f32>> {
        let side = self.params.input_side();
        Tensor::new(&[side, side, 1], pixels).map_err(value_err)
    }

    fn label(&self, (class, p): (usize, f32)) -> (String, f32) {
        (self.meta.class_names[class].clone(), p)
    }
}

#[pymethods]
impl Network {
    /// Fresh Glorot-initialized network; classes are named `class_00`, ...
    #[new]
    #[pyo3(signature = (side = model::TINY_SIDE, classes = 8, seed = 0, laser_color = "green"))]
    fn new(side: usize, classes: usize, seed: u64, laser_color: &str) -> PyResult<Self> {
        let params = model::build_network(side, classes, seed).map_err(value_err)?;
        let meta = CheckpointMeta {
            class_names: eval::default_class_names(classes),
            laser: laser(laser_color)?,
            seed,
            epoch: 0,
            profile: checkpoint::profile_name(side).into(),
            crop_center: false,
            config: None,
        };
        Ok(Self { params, meta })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (params, meta) = checkpoint::load_checkpoint(&path).map_err(|e| match e {
            CheckpointError::Io(io) => PyIOError::new_err(io.to_string()),
            other => value_err(other),
        })?;
        Ok(Self { params, meta })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save_checkpoint(&self.params, &self.meta, &path).map_err(value_err)
    }

    #[getter]
    fn side(&self) -> usize {
        self.params.input_side()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.meta.class_names.clone()
    }

    #[getter]
    fn laser(&self) -> &'static str {
        self.meta.laser.name()
    }

    fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Class probabilities for a preprocessed `side × side` image.
    fn probabilities(&self, pixels: Vec<f32>) -> PyResult<Vec<f32>> {
        let t = self.image_tensor(pixels)?;
        Ok(model::forward(&self.params, &t).map_err(value_err)?.probs.into_data())
    }

    /// `(class_name, probability)` for a preprocessed image.
    fn predict(&self, pixels: Vec<f32>) -> PyResult<(String, f32)> {
        let t = self.image_tensor(pixels)?;
        Ok(self.label(model::predict(&self.params, &t).map_err(value_err)?))
    }

    /// Preprocess an RGB image with this network's laser color and predict.
    #[pyo3(signature = (width, height, data, laser_color = None))]
    fn predict_rgb(
        &self,
        width: usize,
        height: usize,
        data: &[u8],
        laser_color: Option<&str>,
    ) -> PyResult<(String, f32)> {
        let opts = PreprocessOptions {
            laser: laser_color.map(laser).transpose()?.unwrap_or(self.meta.laser),
            side: self.params.input_side(),
            crop_center: self.meta.crop_center,
        };
        let t = preprocess::preprocess_with(&raw_image(width, height, data)?, &opts).map_err(value_err)?;
        Ok(self.label(model::predict(&self.params, &t).map_err(value_err)?))
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(side={}, classes={}, laser={}, params={})",
            self.params.input_side(),
            self.params.class_count(),
            self.meta.laser,
            self.params.param_count()
        )
    }
}

/// Train on a class-per-folder directory. Returns the best network and the
/// per-epoch history as a list of dicts.
#[pyfunction]
#[pyo3(signature = (data_dir, side = model::TINY_SIDE, epochs = 30, lr = 0.001, batch_size = 32,
                    val_fraction = 0.2, seed = 0, laser_color = "green"))]
#[allow(clippy::too_many_arguments)]
fn train_network<'py>(
    py: Python<'py>,
    data_dir: PathBuf,
    side: usize,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    val_fraction: f64,
    seed: u64,
    laser_color: &str,
) -> PyResult<(Network, Vec<Bound<'py, PyDict>>)> {
    let config = TrainConfig {
        data_dir: data_dir.clone(),
        laser: laser(laser_color)?,
        input_side: side,
        epochs,
        lr,
        batch_size,
        val_fraction,
        seed,
        ..TrainConfig::default()
    };
    let scan = ScanOptions {
        seed,
        ..ScanOptions::new(config.laser, side)
    };
    let ds = dataset::scan_dataset_with(&data_dir, &scan).map_err(value_err)?;
    let outcome = if val_fraction > 0.0 {
        let (t, v) = dataset::split_train_val(&ds, val_fraction, seed).map_err(value_err)?;
        py.detach(|| train::train(&config, &t, Some(&v), |_| {}))
    } else {
        py.detach(|| train::train(&config, &ds, None, |_| {}))
    }
    .map_err(value_err)?;
    let history = outcome
        .history
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("epoch", r.epoch)?;
            d.set_item("train_loss", r.train_loss)?;
            d.set_item("train_acc", r.train_acc)?;
            d.set_item("val_loss", r.val_loss)?;
            d.set_item("val_acc", r.val_acc)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let meta = CheckpointMeta {
        class_names: ds.class_names.clone(),
        laser: config.laser,
        seed,
        epoch: outcome.best_epoch,
        profile: checkpoint::profile_name(side).into(),
        crop_center: false,
        config: None,
    };
    Ok((
        Network {
            params: outcome.best,
            meta,
        },
        history,
    ))
}

#[pymodule]
fn speckle(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Network>()?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(spatial_chain, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess_rgb, m)?)?;
    m.add_function(wrap_pyfunction!(load_image, m)?)?;
    m.add_function(wrap_pyfunction!(synth_speckle, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(confusion_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(classification_report, m)?)?;
    m.add_function(wrap_pyfunction!(train_network, m)?)?;
    Ok(())
}
