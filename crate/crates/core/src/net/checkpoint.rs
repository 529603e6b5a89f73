//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "BCVACKPT"
//! version   u32
//! hdr_len   u64, then hdr_len bytes of JSON (CheckpointHeader)
//! count     u32
//! count x { name_len u32, name utf-8, rank u32, dims u64 x rank, values f64 x prod(dims) }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{InputSpec, Model, ModelConfig, NetError, Result, TrainMode};
use crate::grad::Tensor;
use crate::returns::{DistanceStats, ReturnConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BCVACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// The return labeling a model's value head was trained against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelingRef {
    pub return_config: ReturnConfig,
    pub distance_stats: DistanceStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model_config: ModelConfig,
    pub input: InputSpec,
    pub mode: TrainMode,
    pub labeling: Option<LabelingRef>,
    pub steps: u64,
}

fn corrupt(m: impl Into<String>) -> NetError {
    NetError::Checkpoint(m.into())
}

pub fn write_checkpoint<W: Write>(
    model: &Model,
    mode: TrainMode,
    labeling: Option<LabelingRef>,
    mut w: W,
) -> Result<()> {
    let header = CheckpointHeader {
        model_config: model.config.clone(),
        input: model.input,
        mode,
        labeling,
        steps: model.store.steps(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(model.store.len() as u32).to_le_bytes())?;
    for (name, t) in model.store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(
    model: &Model,
    mode: TrainMode,
    labeling: Option<LabelingRef>,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_checkpoint(model, mode, labeling, BufWriter::new(File::create(path)?))
}

fn read_exact<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| corrupt(format!("truncated while reading {what}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r, 4, what)?.try_into().unwrap()))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r, 8, what)?.try_into().unwrap()))
}

const MAX_HEADER: u64 = 1 << 20;

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Model, CheckpointHeader)> {
    if read_exact(&mut r, 8, "magic")? != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = read_u32(&mut r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let hlen = read_u64(&mut r, "header length")?;
    if hlen > MAX_HEADER {
        return Err(corrupt("header too large"));
    }
    let hbytes = read_exact(&mut r, hlen as usize, "header")?;
    let header: CheckpointHeader =
        serde_json::from_slice(&hbytes).map_err(|e| corrupt(format!("header: {e}")))?;
    let mut model = Model::new(header.model_config.clone(), header.input, 0)?;
    let count = read_u32(&mut r, "entry count")? as usize;
    if count != model.store.len() {
        return Err(corrupt(format!(
            "{count} parameter entries, model has {}",
            model.store.len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let nlen = read_u32(&mut r, "name length")? as usize;
        if nlen > 4096 {
            return Err(corrupt("parameter name too long"));
        }
        let name = String::from_utf8(read_exact(&mut r, nlen, "name")?)
            .map_err(|_| corrupt("parameter name is not utf-8"))?;
        let id = model
            .store
            .id(&name)
            .map_err(|_| corrupt(format!("unknown parameter `{name}`")))?;
        if std::mem::replace(&mut seen[id.0], true) {
            return Err(corrupt(format!("duplicate parameter `{name}`")));
        }
        let rank = read_u32(&mut r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(read_u64(&mut r, "dims")? as usize);
        }
        if shape != model.store.value(id).shape() {
            return Err(corrupt(format!(
                "`{name}` has shape {shape:?}, expected {:?}",
                model.store.value(id).shape()
            )));
        }
        let n: usize = shape.iter().product();
        let bytes = read_exact(&mut r, n * 8, &name)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *model.store.value_mut(id) = Tensor::new(shape, data)?;
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(corrupt("trailing bytes after last entry"));
    }
    model.store.set_steps(header.steps);
    Ok((model, header))
}

/// Loads a checkpoint, failing if its model config differs from `expected`.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
    expected: Option<&ModelConfig>,
) -> Result<(Model, CheckpointHeader)> {
    let (model, header) = read_checkpoint(BufReader::new(File::open(path)?))?;
    if let Some(cfg) = expected {
        if cfg != &header.model_config {
            return Err(NetError::ConfigMismatch);
        }
    }
    Ok((model, header))
}
