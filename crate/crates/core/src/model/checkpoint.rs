//! Checkpoint container.
//!
//! Layout: the 8-byte magic `CUTPASTE`, a little-endian `u32` format version,
//! a little-endian `u32` header length, the UTF-8 JSON header, then every
//! tensor listed in the header as little-endian `f32` values in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackboneConfig, Model};
use crate::error::{Error, Result};
use crate::nn::{HasParams, Real};
use crate::rng::RngState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CUTPASTE";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: BackboneConfig,
    pub n_classes: usize,
    pub step: u64,
    pub rng: Option<RngState>,
    /// Free-form run metadata (training configuration and the like).
    #[serde(default)]
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorInfo>,
}

/// Writes parameters and normalization statistics as `f32`.
pub fn save_checkpoint<F: Real>(
    path: &Path,
    model: &Model<F>,
    step: u64,
    rng: Option<RngState>,
    extra: serde_json::Value,
) -> Result<()> {
    let params = model.params();
    let buffers = model.buffers();
    let mut tensors = Vec::new();
    let mut values: Vec<&[F]> = Vec::new();
    for p in &params {
        tensors.push(TensorInfo {
            name: p.name.clone(),
            shape: p.shape.clone(),
        });
        values.push(&p.value);
    }
    for b in &buffers {
        tensors.push(TensorInfo {
            name: b.name.clone(),
            shape: vec![b.value.len()],
        });
        values.push(&b.value);
    }
    let mut config = model.config.clone();
    config.pretrained_weights = None;
    let header = CheckpointHeader {
        config,
        n_classes: model.n_classes,
        step,
        rng,
        extra,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Data(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u32).to_le_bytes())
        .map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for tensor in values {
        for v in tensor {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())
                .map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads the header and raw tensors of a checkpoint.
pub(crate) fn read_tensors(path: &Path) -> Result<(CheckpointHeader, Vec<Vec<f32>>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |reason: &str| Error::Load(format!("{}: {reason}", path.display()));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| bad("truncated file"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| bad("truncated file"))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    r.read_exact(&mut word).map_err(|_| bad("truncated file"))?;
    let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
    r.read_exact(&mut json)
        .map_err(|_| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| bad(&format!("bad header: {e}")))?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for info in &header.tensors {
        let n: usize = info.shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| bad(&format!("truncated tensor {}", info.name)))?;
        tensors.push(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        );
    }
    Ok((header, tensors))
}

/// Rebuilds a model (parameters and normalization statistics) from a
/// checkpoint.
pub fn load_checkpoint<F: Real>(path: &Path) -> Result<(Model<F>, CheckpointHeader)> {
    let (header, tensors) = read_tensors(path)?;
    let mut model = Model::build(header.config.clone(), header.n_classes, 0)?;
    model.assign_tensors(&header, &tensors, path, true)?;
    Ok((model, header))
}
