//! Synthetic laser speckle and labeled dataset trees.
//!
//! A speckle plane is a circular-pupil-filtered complex Gaussian field. The
//! spectrum is i.i.d. complex normal inside `mask_radius` (cycles per pixel)
//! of DC and zero outside; its inverse FFT gives the field, and `|field|²`
//! the intensity. The resulting
//! intensity is fully developed speckle (exponentially distributed), with a
//! grain size inversely proportional to `mask_radius`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;
use thiserror::Error;

use crate::image_io::{self, ImageError};
use crate::preprocess::{LaserColor, Plane, PreprocessError, RawImage};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("mask radius must be in (0, 0.5], got {0}")]
    MaskRadius(f64),
    #[error("contrast must be in [0, 1], got {0}")]
    Contrast(f64),
    #[error("background must be in [0, 255], got {0}")]
    Background(f64),
    #[error("grid must be at least 1 pixel")]
    Grid,
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("need at least 1 image per class")]
    NoImages,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("writing manifest: {0}")]
    Manifest(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpeckleParams {
    /// Side of the square output plane in pixels.
    pub grid: usize,
    /// Pupil radius in cycles per pixel; 0.5 is Nyquist.
    pub mask_radius: f64,
    /// Scales intensity fluctuations around the background; 0 gives a flat plane.
    pub contrast: f64,
    /// Mean level in `[0, 255]`.
    pub background: f64,
    pub seed: u64,
}

impl SpeckleParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.grid == 0 {
            return Err(SynthError::Grid);
        }
        if !(self.mask_radius > 0.0 && self.mask_radius <= 0.5) {
            return Err(SynthError::MaskRadius(self.mask_radius));
        }
        if !(0.0..=1.0).contains(&self.contrast) {
            return Err(SynthError::Contrast(self.contrast));
        }
        if !(0.0..=255.0).contains(&self.background) {
            return Err(SynthError::Background(self.background));
        }
        Ok(())
    }
}

/// Signed frequency of FFT bin `k` on an `n`-point grid, in cycles per pixel.
fn bin_frequency(k: usize, n: usize) -> f64 {
    let k = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    k / n as f64
}

fn ifft_2d(field: &mut [Complex<f64>], n: usize) {
    let fft = FftPlanner::new().plan_fft_inverse(n);
    for row in field.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut column = vec![Complex::default(); n];
    for x in 0..n {
        for y in 0..n {
            column[y] = field[y * n + x];
        }
        fft.process(&mut column);
        for y in 0..n {
            field[y * n + x] = column[y];
        }
    }
}

/// Raw speckle intensity, normalized to unit mean. Row-major `grid × grid`.
pub fn speckle_intensity(grid: usize, mask_radius: f64, seed: u64) -> Result<Vec<f64>, SynthError> {
    SpeckleParams {
        grid,
        mask_radius,
        contrast: 1.0,
        background: 0.0,
        seed,
    }
    .validate()?;
    let n = grid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = Vec::with_capacity(n * n);
    for y in 0..n {
        let fy = bin_frequency(y, n);
        for x in 0..n {
            let fx = bin_frequency(x, n);
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            let inside = fx * fx + fy * fy <= mask_radius * mask_radius;
            field.push(if inside {
                Complex::new(re, im)
            } else {
                Complex::default()
            });
        }
    }
    ifft_2d(&mut field, n);
    let mut intensity: Vec<f64> = field.iter().map(|c| c.norm_sqr()).collect();
    let mean = intensity.iter().sum::<f64>() / intensity.len() as f64;
    if mean > 0.0 {
        for v in &mut intensity {
            *v /= mean;
        }
    } else {
        intensity.fill(1.0);
    }
    Ok(intensity)
}

/// 8-bit speckle plane: `background · (1 + contrast · (I − 1))`, clamped.
pub fn synth_speckle(p: &SpeckleParams) -> Result<Plane, SynthError> {
    p.validate()?;
    let intensity = speckle_intensity(p.grid, p.mask_radius, p.seed)?;
    let data = intensity
        .iter()
        .map(|&i| {
            (p.background * (1.0 + p.contrast * (i - 1.0)))
                .round()
                .clamp(0.0, 255.0) as u8
        })
        .collect();
    Ok(Plane::new(p.grid, p.grid, data)?)
}

/// Grain-size levels swept by class index (cycles per pixel).
pub const CLASS_MASK_RADII: [f64; 4] = [0.05, 0.1, 0.2, 0.4];
/// Contrast levels swept by class index.
pub const CLASS_CONTRASTS: [f64; 2] = [1.0, 0.5];
/// Half-width of the uniform noise put in the two non-laser channels.
pub const CROSS_CHANNEL_NOISE: i32 = 10;
/// Mean level of the two non-laser channels.
pub const CROSS_CHANNEL_BASE: i32 = 20;

/// Speckle statistics for class `k` (seed left at 0).
///
/// `mask_radius = CLASS_MASK_RADII[k % 4]`, `contrast = CLASS_CONTRASTS[(k / 4) % 2]`,
/// `background = 80 + 12·(k % 8) + 4·(k / 8)`. Distinct for every `k`.
pub fn class_params(k: usize, grid: usize) -> SpeckleParams {
    SpeckleParams {
        grid,
        mask_radius: CLASS_MASK_RADII[k % CLASS_MASK_RADII.len()],
        contrast: CLASS_CONTRASTS[(k / CLASS_MASK_RADII.len()) % CLASS_CONTRASTS.len()],
        background: (80 + 12 * (k % 8) + 4 * (k / 8)).min(255) as f64,
        seed: 0,
    }
}

/// Per-image seed derived from the dataset seed (splitmix64 finalizer).
pub fn image_seed(seed: u64, class: usize, index: usize) -> u64 {
    let mut z =
        seed ^ (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn class_name(k: usize) -> String {
    format!("class_{k:02}")
}

/// Put `pattern` in the laser channel and low-amplitude noise in the others.
pub fn compose_rgb(pattern: &Plane, laser: LaserColor, noise_seed: u64) -> Result<RawImage, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut data = Vec::with_capacity(pattern.data.len() * 3);
    for &v in &pattern.data {
        for ch in 0..3 {
            if ch == laser.channel() {
                data.push(v);
            } else {
                let n = rng.random_range(-CROSS_CHANNEL_NOISE..=CROSS_CHANNEL_NOISE);
                data.push((CROSS_CHANNEL_BASE + n).clamp(0, 255) as u8);
            }
        }
    }
    Ok(RawImage::new(pattern.width, pattern.height, data)?)
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub class_count: usize,
    pub per_class: usize,
    pub side: usize,
    pub out_dir: PathBuf,
    pub laser: LaserColor,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestRow {
    pub path: String,
    pub class: String,
    pub seed: u64,
    pub mask_radius: f64,
    pub contrast: f64,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

/// Write `out_dir/<class>/<class>_<i>.ppm` for every class plus `manifest.csv`.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<ManifestRow>, SynthError> {
    if cfg.class_count < 2 {
        return Err(SynthError::TooFewClasses(cfg.class_count));
    }
    if cfg.per_class == 0 {
        return Err(SynthError::NoImages);
    }
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SynthError::Io { path, source }
    };
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let mut rows = Vec::with_capacity(cfg.class_count * cfg.per_class);
    for k in 0..cfg.class_count {
        let name = class_name(k);
        let dir = cfg.out_dir.join(&name);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let base = class_params(k, cfg.side);
        for i in 0..cfg.per_class {
            let seed = image_seed(cfg.seed, k, i);
            let params = SpeckleParams { seed, ..base };
            let pattern = synth_speckle(&params)?;
            let img = compose_rgb(&pattern, cfg.laser, !seed)?;
            let file = format!("{name}_{i:04}.ppm");
            let path = dir.join(&file);
            fs::write(&path, image_io::encode_ppm(&img)).map_err(io_err(&path))?;
            rows.push(ManifestRow {
                path: format!("{name}/{file}"),
                class: name.clone(),
                seed,
                mask_radius: params.mask_radius,
                contrast: params.contrast,
            });
        }
    }
    let manifest = cfg.out_dir.join(MANIFEST_FILE);
    let mut w = csv::Writer::from_path(&manifest)?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush().map_err(io_err(&manifest))?;
    Ok(rows)
}
