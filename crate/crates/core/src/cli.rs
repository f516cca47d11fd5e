//! Command-line surface: `synth`, `train`, `eval`, `predict`.
//!
//! Exit codes: 0 success, 2 bad flags or configuration, 3 dataset / image /
//! checkpoint content errors, 4 filesystem I/O errors, 5 laser-color mismatch.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{self, CheckpointError, CheckpointMeta};
use crate::dataset::{self, DatasetError, Remap, ScanOptions};
use crate::eval::{self, EvalError};
use crate::image_io;
use crate::model::{self, FULL_SIDE, TINY_SIDE};
use crate::preprocess::{self, LaserColor, PreprocessOptions};
use crate::synth::{self, SynthConfig, SynthError};
use crate::train::{self, TrainConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_LASER: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "speckle", version, about = "Laser speckle material classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled speckle dataset.
    Synth(SynthArgs),
    /// Train a classifier on a class-per-folder dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write report and confusion-matrix CSVs.
    Eval(EvalArgs),
    /// Classify a single image.
    Predict(PredictArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Laser {
    Red,
    Green,
    Blue,
}

impl From<Laser> for LaserColor {
    fn from(l: Laser) -> Self {
        match l {
            Laser::Red => LaserColor::Red,
            Laser::Green => LaserColor::Green,
            Laser::Blue => LaserColor::Blue,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// 256×256 input, 13,101,214 parameters with 30 classes.
    Full,
    /// 64×64 input, same topology.
    Tiny,
}

impl Profile {
    pub fn side(self) -> usize {
        match self {
            Profile::Full => FULL_SIDE,
            Profile::Tiny => TINY_SIDE,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of classes (at least 2).
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    /// Images per class.
    #[arg(long, default_value_t = 50)]
    pub per_class: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub side: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Laser::Green)]
    pub laser: Laser,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root: one subdirectory of images per class.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Laser::Green)]
    pub laser: Laser,
    /// Network input profile.
    #[arg(long, value_enum, default_value_t = Profile::Full)]
    pub profile: Profile,
    /// Override the profile's input side (minimum 46).
    #[arg(long)]
    pub side: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    /// Adamax learning rate.
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Per-class validation fraction; 0 disables validation.
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint output path.
    #[arg(long, default_value = "model.spkl")]
    pub out: PathBuf,
    /// Per-epoch history CSV.
    #[arg(long, default_value = "history.csv")]
    pub history: PathBuf,
    /// Two-column CSV mapping folder names to material classes.
    #[arg(long)]
    pub remap: Option<PathBuf>,
    /// Center-crop to a square before resizing.
    #[arg(long)]
    pub crop_center: bool,
    /// Skip undecodable images instead of aborting.
    #[arg(long)]
    pub skip_bad: bool,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Laser color of the data; defaults to the checkpoint's.
    #[arg(long, value_enum)]
    pub laser: Option<Laser>,
    /// Accept a laser color different from the checkpoint's.
    #[arg(long)]
    pub force: bool,
    /// Per-class report CSV.
    #[arg(long, default_value = "report.csv")]
    pub report: PathBuf,
    /// Confusion matrix CSV.
    #[arg(long, default_value = "confusion.csv")]
    pub matrix: PathBuf,
    #[arg(long)]
    pub remap: Option<PathBuf>,
    #[arg(long)]
    pub crop_center: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Laser color the image was captured with; defaults to the checkpoint's.
    #[arg(long, value_enum)]
    pub laser: Option<Laser>,
    #[arg(long)]
    pub crop_center: bool,
}

/// A failure carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::new(EXIT_IO, format!("{}: {e}", path.display()))
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        let code = match e {
            DatasetError::Io { .. } => EXIT_IO,
            _ => EXIT_DATA,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        let code = match e {
            CheckpointError::Io(_) => EXIT_IO,
            _ => EXIT_DATA,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Failure::new(EXIT_USAGE, e.to_string()),
            TrainError::Dataset(d) => d.into(),
            other => Failure::new(EXIT_DATA, other.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        let code = match e {
            EvalError::LaserMismatch { .. } => EXIT_LASER,
            EvalError::Io(_) => EXIT_IO,
            _ => EXIT_DATA,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        let code = match e {
            SynthError::TooFewClasses(_) | SynthError::NoImages | SynthError::Grid => EXIT_USAGE,
            SynthError::MaskRadius(_) | SynthError::Contrast(_) | SynthError::Background(_) => EXIT_USAGE,
            _ => EXIT_IO,
        };
        Failure::new(code, e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Train(a) => cmd_train(&a, out, err),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Predict(a) => cmd_predict(&a, out, err),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn write_file(path: &Path, contents: &[u8]) -> CmdResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Failure::io(path, e))
}

fn emit(out: &mut dyn Write, text: std::fmt::Arguments<'_>) -> CmdResult {
    out.write_fmt(text)
        .map_err(|e| Failure::new(EXIT_IO, format!("stdout: {e}")))
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> CmdResult {
    let rows = synth::synth_dataset(&SynthConfig {
        class_count: a.classes,
        per_class: a.per_class,
        side: a.side,
        out_dir: a.out.clone(),
        laser: a.laser.into(),
        seed: a.seed,
    })?;
    emit(
        out,
        format_args!(
            "wrote {} images in {} classes to {}\n",
            rows.len(),
            a.classes,
            a.out.display()
        ),
    )
}

fn load_remap(path: Option<&PathBuf>) -> Result<Option<Remap>, Failure> {
    path.map(Remap::from_csv).transpose().map_err(Failure::from)
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let laser: LaserColor = a.laser.into();
    let config = TrainConfig {
        data_dir: a.data.clone(),
        laser,
        input_side: a.side.unwrap_or(a.profile.side()),
        epochs: a.epochs,
        lr: a.lr,
        beta1: a.beta1,
        beta2: a.beta2,
        batch_size: a.batch_size,
        val_fraction: a.val_fraction,
        seed: a.seed,
        out_path: a.out.clone(),
        history_path: a.history.clone(),
    };
    config.validate()?;

    let scan = ScanOptions {
        preprocess: PreprocessOptions {
            laser,
            side: config.input_side,
            crop_center: a.crop_center,
        },
        remap: load_remap(a.remap.as_ref())?,
        skip_unreadable: a.skip_bad,
        seed: a.seed,
    };
    let ds = dataset::scan_dataset_with(&a.data, &scan)?;
    let (train_ds, val_ds) = if config.val_fraction > 0.0 {
        let (t, v) = dataset::split_train_val(&ds, config.val_fraction, config.seed)?;
        (t, Some(v))
    } else {
        (ds, None)
    };
    if !a.quiet {
        let _ = writeln!(
            err,
            "training on {} samples ({} validation), {} classes, input {}x{}, {} parameters",
            train_ds.len(),
            val_ds.as_ref().map_or(0, |v| v.len()),
            train_ds.class_count(),
            config.input_side,
            config.input_side,
            model::param_count_for(config.input_side, train_ds.class_count()).map_err(TrainError::from)?,
        );
    }

    let outcome = train::train(&config, &train_ds, val_ds.as_ref(), |r| {
        if !a.quiet {
            let val = match (r.val_loss, r.val_acc) {
                (Some(l), Some(acc)) => format!(" val_loss {l:.4} val_acc {acc:.4}"),
                _ => String::new(),
            };
            let _ = writeln!(
                err,
                "epoch {:>3}/{} train_loss {:.4} train_acc {:.4}{val}",
                r.epoch, config.epochs, r.train_loss, r.train_acc
            );
        }
    })?;

    write_file(&config.history_path, train::history_csv(&outcome.history).as_bytes())?;
    let meta = CheckpointMeta {
        class_names: train_ds.class_names.clone(),
        laser,
        seed: config.seed,
        epoch: outcome.best_epoch,
        profile: checkpoint::profile_name(config.input_side).to_string(),
        crop_center: a.crop_center,
        config: serde_json::to_value(&config).ok(),
    };
    let mut buf = Vec::new();
    checkpoint::write_checkpoint(&mut buf, &outcome.best, &meta)?;
    write_file(&config.out_path, &buf)?;

    let last = outcome.history.last().expect("at least one epoch");
    emit(
        out,
        format_args!(
            "final train_loss {:.4} train_acc {:.4}; saved epoch {} to {}\n",
            last.train_loss,
            last.train_acc,
            outcome.best_epoch,
            config.out_path.display()
        ),
    )
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> CmdResult {
    let (params, meta) = checkpoint::load_checkpoint(&a.model)?;
    let laser = a.laser.map_or(meta.laser, LaserColor::from);
    eval::check_laser(meta.laser, laser, a.force)?;
    let scan = ScanOptions {
        preprocess: PreprocessOptions {
            laser,
            side: params.input_side(),
            crop_center: a.crop_center || meta.crop_center,
        },
        remap: load_remap(a.remap.as_ref())?,
        skip_unreadable: false,
        seed: meta.seed,
    };
    let ds = dataset::scan_dataset_with(&a.data, &scan)?;
    if ds.class_names != meta.class_names {
        return Err(Failure::new(
            EXIT_DATA,
            format!(
                "dataset classes {:?} do not match the checkpoint's {:?}",
                ds.class_names, meta.class_names
            ),
        ));
    }
    let (report, cm) = eval::evaluate(&params, &ds)?;
    write_file(&a.report, report.to_csv().as_bytes())?;
    write_file(&a.matrix, cm.to_csv().as_bytes())?;
    emit(
        out,
        format_args!(
            "{report}\naccuracy {:.4}\nmacro-F1 {:.4}\n",
            report.accuracy.rounded(),
            eval::round_half_up(report.macro_f1)
        ),
    )
}

pub fn cmd_predict(a: &PredictArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let (params, meta) = checkpoint::load_checkpoint(&a.model)?;
    let laser = a.laser.map_or(meta.laser, LaserColor::from);
    if laser != meta.laser {
        let _ = writeln!(
            err,
            "note: classifying the {laser} plane with a model trained on {} captures",
            meta.laser
        );
    }
    let raw = image_io::load_image(&a.image).map_err(|e| match e {
        image_io::ImageError::Io { .. } => Failure::new(EXIT_DATA, e.to_string()),
        other => Failure::new(EXIT_DATA, format!("{}: {other}", a.image.display())),
    })?;
    let opts = PreprocessOptions {
        laser,
        side: params.input_side(),
        crop_center: a.crop_center || meta.crop_center,
    };
    let image = preprocess::preprocess_with(&raw, &opts).map_err(|e| Failure::new(EXIT_DATA, e.to_string()))?;
    let (class, p) = model::predict(&params, &image).map_err(|e| Failure::new(EXIT_DATA, e.to_string()))?;
    emit(out, format_args!("{} {:.4}\n", meta.class_names[class], p))
}
