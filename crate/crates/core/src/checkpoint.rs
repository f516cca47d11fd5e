//! Binary checkpoint format (little-endian):
//!
//! ```text
//! "SPKL" | u32 version=1 | u32 input_side | u32 class_count | u32 tensor_count
//! per tensor: u16 name_len | name (UTF-8) | u8 rank | u32 dims[rank] | f32 data
//! u32 json_len | metadata JSON (UTF-8)
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{param_shapes, ModelError, NetworkParams, TENSOR_NAMES};
use crate::preprocess::LaserColor;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SPKL";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("inconsistent checkpoint: {0}")]
    Inconsistent(String),
    #[error("checkpoint metadata is not valid JSON: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
}

/// Everything stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub class_names: Vec<String>,
    pub laser: LaserColor,
    pub seed: u64,
    pub epoch: usize,
    /// "full", "tiny" or "custom".
    #[serde(default)]
    pub profile: String,
    #[serde(default)]
    pub crop_center: bool,
    /// Training configuration echo, free-form.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

pub fn profile_name(input_side: usize) -> &'static str {
    match input_side {
        crate::model::FULL_SIDE => "full",
        crate::model::TINY_SIDE => "tiny",
        _ => "custom",
    }
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    params: &NetworkParams<f32>,
    meta: &CheckpointMeta,
) -> Result<(), CheckpointError> {
    if meta.class_names.len() != params.class_count() {
        return Err(CheckpointError::Inconsistent(format!(
            "{} class names for a {}-class network",
            meta.class_names.len(),
            params.class_count()
        )));
    }
    let u32_of = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| CheckpointError::Inconsistent(format!("{what} {v} exceeds u32")))
    };
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u32_of(params.input_side(), "input side")?.to_le_bytes())?;
    w.write_all(&u32_of(params.class_count(), "class count")?.to_le_bytes())?;
    let tensors = params.tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in TENSOR_NAMES.iter().zip(tensors) {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[t.rank() as u8])?;
        for &d in t.shape() {
            w.write_all(&u32_of(d, "dimension")?.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    let json = serde_json::to_vec(meta)?;
    w.write_all(&u32_of(json.len(), "metadata length")?.to_le_bytes())?;
    w.write_all(&json)?;
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<(), CheckpointError> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                CheckpointError::Truncated(what.to_string())
            } else {
                CheckpointError::Io(e)
            }
        })
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        let mut b = [0; 1];
        self.exact(&mut b, what)?;
        Ok(b[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        let mut b = [0; 2];
        self.exact(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let mut b = [0; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<(NetworkParams<f32>, CheckpointMeta), CheckpointError> {
    let mut r = Reader { inner: r };
    let mut magic = [0; 4];
    r.exact(&mut magic, "header")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32("header")?;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let input_side = r.u32("header")? as usize;
    let class_count = r.u32("header")? as usize;
    let count = r.u32("header")? as usize;
    let shapes =
        param_shapes(input_side, class_count).map_err(|e: ModelError| CheckpointError::Inconsistent(e.to_string()))?;
    if count != shapes.len() {
        return Err(CheckpointError::Inconsistent(format!(
            "tensor count {count}, expected {}",
            shapes.len()
        )));
    }

    let mut tensors = Vec::with_capacity(count);
    for (expected_name, expected_shape) in TENSOR_NAMES.iter().zip(&shapes) {
        let ctx = format!("tensor {expected_name}");
        let name_len = r.u16(&ctx)? as usize;
        let mut name = vec![0; name_len];
        r.exact(&mut name, &ctx)?;
        let name =
            String::from_utf8(name).map_err(|_| CheckpointError::Inconsistent(format!("{ctx}: name is not UTF-8")))?;
        if name != *expected_name {
            return Err(CheckpointError::Inconsistent(format!(
                "found tensor '{name}' where '{expected_name}' was expected"
            )));
        }
        let ctx = format!("tensor {name}");
        let rank = r.u8(&ctx)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32(&ctx)? as usize);
        }
        if dims != *expected_shape {
            return Err(CheckpointError::Inconsistent(format!(
                "{name} has dims {dims:?} but input side {input_side} and {class_count} classes imply {expected_shape:?}"
            )));
        }
        let n: usize = dims.iter().product();
        let mut raw = vec![0; n * 4];
        r.exact(&mut raw, &ctx)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push(Tensor::new(&dims, data).map_err(|e| CheckpointError::Inconsistent(e.to_string()))?);
    }

    let json_len = r.u32("metadata")? as usize;
    let mut json = vec![0; json_len];
    r.exact(&mut json, "metadata")?;
    let meta: CheckpointMeta = serde_json::from_slice(&json)?;
    if meta.class_names.len() != class_count {
        return Err(CheckpointError::Inconsistent(format!(
            "metadata lists {} class names, header says {class_count}",
            meta.class_names.len()
        )));
    }
    let params = NetworkParams::from_tensors(input_side, class_count, tensors)
        .map_err(|e| CheckpointError::Inconsistent(e.to_string()))?;
    Ok((params, meta))
}

pub fn save_checkpoint(
    params: &NetworkParams<f32>,
    meta: &CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params, meta)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(NetworkParams<f32>, CheckpointMeta), CheckpointError> {
    let bytes = fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}
