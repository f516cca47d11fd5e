//! Class-per-folder datasets and the seeded split and batching built on them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::image_io::{self, ImageError};
use crate::preprocess::{self, LaserColor, PreprocessError, PreprocessOptions};
use crate::tensor::Tensor;

pub const IMAGE_EXTENSIONS: [&str; 2] = ["ppm", "png"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset root {0} contains no class directories")]
    Empty(PathBuf),
    #[error("class directory {0} contains no images")]
    EmptyClass(PathBuf),
    #[error("failed to load {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: ImageError,
    },
    #[error("failed to preprocess {path}: {source}")]
    Preprocess {
        path: PathBuf,
        #[source]
        source: PreprocessError,
    },
    #[error("remap file {path}: {detail}")]
    Remap { path: PathBuf, detail: String },
    #[error("class '{class}' has {count} samples; a split needs at least 2")]
    ClassTooSmall { class: String, count: usize },
    #[error("validation fraction must be in (0, 1), got {0}")]
    Fraction(f64),
    #[error("batch size must be at least 1")]
    BatchSize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: usize,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Sorted, unique.
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
    pub laser: LaserColor,
    pub side: usize,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    /// Number of samples per class index.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// `(image, label)` pairs for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Vec<(&Tensor<f32>, usize)> {
        indices
            .iter()
            .map(|&i| (&self.samples[i].image, self.samples[i].label))
            .collect()
    }

    fn with_samples(&self, samples: Vec<Sample>) -> Dataset {
        Dataset {
            class_names: self.class_names.clone(),
            samples,
            laser: self.laser,
            side: self.side,
            seed: self.seed,
        }
    }
}

/// Folder name → material name mapping from a two-column CSV
/// (`variant_folder,material`). Folders not listed keep their own name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Remap(BTreeMap<String, String>);

impl Remap {
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let remap_err = |detail: String| DatasetError::Remap {
            path: path.to_path_buf(),
            detail,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| remap_err(e.to_string()))?;
        let mut map = BTreeMap::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| remap_err(e.to_string()))?;
            if record.len() != 2 {
                return Err(remap_err(format!(
                    "line {}: expected 2 columns, got {}",
                    line + 1,
                    record.len()
                )));
            }
            if line == 0 && &record[0] == "variant_folder" {
                continue;
            }
            map.insert(record[0].to_string(), record[1].to_string());
        }
        Ok(Remap(map))
    }

    pub fn from_pairs<I, A, B>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        Remap(pairs.into_iter().map(|(a, b)| (a.into(), b.into())).collect())
    }

    pub fn class_for<'a>(&'a self, folder: &'a str) -> &'a str {
        self.0.get(folder).map_or(folder, String::as_str)
    }
}

#[derive(Debug, Clone)]
pub struct ScanOptions {
    pub preprocess: PreprocessOptions,
    pub remap: Option<Remap>,
    /// Skip undecodable files instead of failing the whole scan.
    pub skip_unreadable: bool,
    pub seed: u64,
}

impl ScanOptions {
    pub fn new(laser: LaserColor, side: usize) -> Self {
        Self {
            preprocess: PreprocessOptions::new(laser, side),
            remap: None,
            skip_unreadable: false,
            seed: 0,
        }
    }
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut entries = fs::read_dir(dir)
        .map_err(io_err)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err)?;
    entries.retain(|p| {
        p.file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| !n.starts_with('.'))
    });
    entries.sort();
    Ok(entries)
}

fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Every image file under `root/<class>/`, sorted, with its class folder name.
pub fn list_images(root: &Path) -> Result<Vec<(String, Vec<PathBuf>)>, DatasetError> {
    let mut classes = Vec::new();
    for dir in read_dir_sorted(root)?.into_iter().filter(|p| p.is_dir()) {
        let folder = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let files: Vec<PathBuf> = read_dir_sorted(&dir)?.into_iter().filter(|p| is_image(p)).collect();
        if files.is_empty() {
            return Err(DatasetError::EmptyClass(dir));
        }
        classes.push((folder, files));
    }
    if classes.is_empty() {
        return Err(DatasetError::Empty(root.to_path_buf()));
    }
    Ok(classes)
}

pub fn load_sample(path: &Path, opts: &PreprocessOptions) -> Result<Tensor<f32>, DatasetError> {
    let raw = image_io::load_image(path).map_err(|source| DatasetError::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    preprocess::preprocess_with(&raw, opts).map_err(|source| DatasetError::Preprocess {
        path: path.to_path_buf(),
        source,
    })
}

pub fn scan_dataset(root: impl AsRef<Path>, laser: LaserColor, side: usize) -> Result<Dataset, DatasetError> {
    scan_dataset_with(root, &ScanOptions::new(laser, side))
}

/// Each immediate subdirectory of `root` is a class (after optional remap).
///
/// Files are decoded in parallel; the result is ordered by sorted path.
pub fn scan_dataset_with(root: impl AsRef<Path>, opts: &ScanOptions) -> Result<Dataset, DatasetError> {
    let root = root.as_ref();
    let folders = list_images(root)?;
    let remap = opts.remap.clone().unwrap_or_default();
    let class_names: Vec<String> = folders
        .iter()
        .map(|(f, _)| remap.class_for(f).to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let mut jobs = Vec::new();
    for (folder, files) in &folders {
        let material = remap.class_for(folder);
        let label = class_names
            .binary_search_by(|c| c.as_str().cmp(material))
            .expect("collected above");
        jobs.extend(files.iter().map(|f| (f.clone(), label)));
    }
    jobs.sort();

    let loaded: Vec<_> = jobs
        .par_iter()
        .map(|(path, label)| load_sample(path, &opts.preprocess).map(|image| (path, *label, image)))
        .collect();

    let mut samples = Vec::with_capacity(loaded.len());
    for r in loaded {
        match r {
            Ok((path, label, image)) => samples.push(Sample {
                image,
                label,
                path: path.clone(),
            }),
            Err(e) if opts.skip_unreadable => eprintln!("warning: skipping {e}"),
            Err(e) => return Err(e),
        }
    }
    let ds = Dataset {
        class_names,
        samples,
        laser: opts.preprocess.laser,
        side: opts.preprocess.side,
        seed: opts.seed,
    };
    if let Some(k) = ds.class_counts().iter().position(|&c| c == 0) {
        return Err(DatasetError::EmptyClass(root.join(&ds.class_names[k])));
    }
    Ok(ds)
}

/// Stratified split: per class, a seeded shuffle sends
/// `max(1, floor(fraction · n_c))` samples to validation.
pub fn split_train_val(ds: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DatasetError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DatasetError::Fraction(val_fraction));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count()];
    for (i, s) in ds.samples.iter().enumerate() {
        per_class[s.label].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for (k, mut idx) in per_class.into_iter().enumerate() {
        if idx.len() < 2 {
            return Err(DatasetError::ClassTooSmall {
                class: ds.class_names[k].clone(),
                count: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        let n_val = ((val_fraction * idx.len() as f64).floor() as usize).clamp(1, idx.len() - 1);
        val_idx.extend_from_slice(&idx[..n_val]);
        train_idx.extend_from_slice(&idx[n_val..]);
    }
    // keep dataset order within each split
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&i| ds.samples[i].clone()).collect();
    Ok((ds.with_samples(pick(&train_idx)), ds.with_samples(pick(&val_idx))))
}

/// Seeded shuffle of sample indices cut into batches; the last may be short.
pub fn make_batches(len: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>, DatasetError> {
    if batch_size == 0 {
        return Err(DatasetError::BatchSize);
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake(counts: &[usize]) -> Dataset {
        let mut samples = Vec::new();
        for (label, &n) in counts.iter().enumerate() {
            for i in 0..n {
                samples.push(Sample {
                    image: Tensor::filled(&[1, 1, 1], (label * 1000 + i) as f32).unwrap(),
                    label,
                    path: PathBuf::from(format!("{label}/{i}")),
                });
            }
        }
        Dataset {
            class_names: (0..counts.len()).map(|i| format!("c{i}")).collect(),
            samples,
            laser: LaserColor::Green,
            side: 1,
            seed: 0,
        }
    }

    fn keys(ds: &Dataset) -> Vec<f32> {
        let mut v: Vec<f32> = ds.samples.iter().map(|s| s.image.data()[0]).collect();
        v.sort_by(f32::total_cmp);
        v
    }

    #[test]
    fn split_is_stratified() {
        let ds = fake(&[100, 100, 100]);
        let (train, val) = split_train_val(&ds, 0.2, 1).unwrap();
        assert_eq!(train.class_counts(), vec![80, 80, 80]);
        assert_eq!(val.class_counts(), vec![20, 20, 20]);
        let mut union = keys(&train);
        union.extend(keys(&val));
        union.sort_by(f32::total_cmp);
        assert_eq!(union, keys(&ds));
    }

    #[test]
    fn split_seeding() {
        let ds = fake(&[30, 30]);
        let a = split_train_val(&ds, 0.2, 5).unwrap();
        let b = split_train_val(&ds, 0.2, 5).unwrap();
        let c = split_train_val(&ds, 0.2, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(keys(&a.1), keys(&c.1));
        assert_eq!(a.1.class_counts(), c.1.class_counts());
    }

    #[test]
    fn split_minimums() {
        let (train, val) = split_train_val(&fake(&[2, 3]), 0.2, 0).unwrap();
        assert_eq!(val.class_counts(), vec![1, 1]);
        assert_eq!(train.class_counts(), vec![1, 2]);
        assert!(matches!(
            split_train_val(&fake(&[5, 1]), 0.2, 0),
            Err(DatasetError::ClassTooSmall { count: 1, .. })
        ));
        assert!(matches!(
            split_train_val(&fake(&[5, 5]), 0.0, 0),
            Err(DatasetError::Fraction(_))
        ));
    }

    #[test]
    fn batches() {
        let b = make_batches(100, 32, 3).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![32, 32, 32, 4]);
        assert_eq!(b, make_batches(100, 32, 3).unwrap());
        assert_ne!(b, make_batches(100, 32, 4).unwrap());
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(matches!(make_batches(10, 0, 0), Err(DatasetError::BatchSize)));
    }

    #[test]
    fn remap_defaults_to_folder() {
        let r = Remap::from_pairs([("oak_light", "oak")]);
        assert_eq!(r.class_for("oak_light"), "oak");
        assert_eq!(r.class_for("mdf"), "mdf");
    }
}
