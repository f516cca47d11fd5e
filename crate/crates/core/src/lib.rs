//! Laser speckle material classification.
//!
//! An RGB speckle capture is reduced to the plane matching the laser color
//! ([`preprocess`]), then classified by a fixed four-convolution,
//! two-dense-layer network ([`model`]) trained with Adamax ([`optimizer`]).
//! [`eval`] produces confusion matrices and per-class precision / recall /
//! F1; [`synth`] generates labeled synthetic speckle for desk-scale runs.
//!
//! ```no_run
//! use speckle_core::{dataset, model, preprocess::LaserColor};
//!
//! let ds = dataset::scan_dataset("data/", LaserColor::Green, model::TINY_SIDE)?;
//! let net = model::build_network(model::TINY_SIDE, ds.class_count(), 0)?;
//! let (class, p) = model::predict(&net, &ds.samples[0].image)?;
//! println!("{} {p:.4}", ds.class_names[class]);
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod eval;
pub mod image_io;
pub mod model;
pub mod ops;
pub mod optimizer;
pub mod preprocess;
pub mod synth;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use dataset::{Dataset, Sample};
pub use eval::{ClassificationReport, ConfusionMatrix};
pub use model::{build_network, forward, loss_and_gradients, predict, NetworkParams};
pub use optimizer::{adamax_init, AdamaxConfig, AdamaxState};
pub use preprocess::{LaserColor, RawImage};
pub use tensor::{Scalar, Tensor};
