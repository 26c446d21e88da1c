//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` metadata length, the
//! JSON metadata block, then every array as little-endian `f32` in directory
//! order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Mat;
use crate::trainer::{TrainConfig, Trainer};

pub const MAGIC: [u8; 8] = *b"TKGNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrayKind {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub kind: ArrayKind,
    pub shape: [usize; 2],
    /// Offset in bytes from the start of the array section.
    pub offset: u64,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub text: u64,
    pub embedder: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub config: TrainConfig,
    pub seeds: Seeds,
    pub step: u64,
    pub optimizer_step: u64,
    pub arrays: Vec<ArrayEntry>,
}

fn push_array<T: Scalar>(bytes: &mut Vec<u8>, m: &Mat<T>) {
    for &v in m.data() {
        bytes.extend_from_slice(&v.to_f32_bits());
    }
}

/// Serializes the trainer state; the result is a pure function of the state.
pub fn to_bytes<T: Scalar>(trainer: &Trainer<T>) -> Result<Vec<u8>> {
    let mut arrays = Vec::new();
    let mut data = Vec::new();
    let mut add = |name: &str, kind: ArrayKind, frozen: bool, m: &Mat<T>| {
        arrays.push(ArrayEntry {
            name: name.to_string(),
            kind,
            shape: [m.rows(), m.cols()],
            offset: data.len() as u64,
            frozen,
        });
        push_array(&mut data, m);
    };
    for (id, p) in trainer.model.store.iter() {
        add(&p.name, ArrayKind::Param, p.frozen, &p.value);
        if !p.frozen {
            add(&p.name, ArrayKind::AdamM, false, &trainer.opt.m[id.index()]);
            add(&p.name, ArrayKind::AdamV, false, &trainer.opt.v[id.index()]);
        }
    }
    let cfg = &trainer.config;
    let meta = Metadata {
        config: cfg.clone(),
        seeds: Seeds { init: cfg.seed, text: cfg.model.text_seed, embedder: cfg.model.embedder_seed },
        step: trainer.step,
        optimizer_step: trainer.opt.t,
        arrays,
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + data.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, trainer: &Trainer<T>) -> Result<()> {
    std::fs::write(path, to_bytes(trainer)?).map_err(|e| Error::io(path, e))
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len());
    let Some(end) = end else {
        return Err(Error::Format(format!("truncated file while reading {what}")));
    };
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

/// Parses the header and metadata; returns the metadata and the array section.
pub fn parse_header(bytes: &[u8]) -> Result<(Metadata, &[u8])> {
    let mut at = 0;
    let magic = take(bytes, &mut at, 8, "magic")?;
    if magic != MAGIC {
        return Err(Error::Version {
            found: format!("magic {}", hex::encode(magic)),
            expected: format!("magic {}", hex::encode(MAGIC)),
        });
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version.to_string(), expected: CHECKPOINT_VERSION.to_string() });
    }
    let len = u64::from_le_bytes(take(bytes, &mut at, 8, "metadata length")?.try_into().unwrap());
    let len = usize::try_from(len).map_err(|_| Error::Format("metadata length overflows".into()))?;
    let meta: Metadata = serde_json::from_slice(take(bytes, &mut at, len, "metadata")?)
        .map_err(|e| Error::Format(format!("metadata: {e}")))?;
    Ok((meta, &bytes[at..]))
}

fn read_array<T: Scalar>(data: &[u8], entry: &ArrayEntry) -> Result<Mat<T>> {
    let [r, c] = entry.shape;
    let n = r.checked_mul(c).and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::Format("array too large".into()))?;
    let mut at = usize::try_from(entry.offset).map_err(|_| Error::Format("offset overflows".into()))?;
    let raw = take(data, &mut at, n, &entry.name)?;
    let vals = raw
        .chunks_exact(4)
        .map(|b| T::from_f32_bits(b.try_into().unwrap()))
        .collect();
    Ok(Mat::from_vec(r, c, vals))
}

fn check_shape<T: Scalar>(entry: &ArrayEntry, expected: &Mat<T>) -> Result<()> {
    let want = [expected.rows(), expected.cols()];
    if entry.shape != want {
        return Err(Error::shape(
            entry.name.clone(),
            format!("{}x{}", want[0], want[1]),
            format!("{}x{}", entry.shape[0], entry.shape[1]),
        ));
    }
    Ok(())
}

/// Copies every stored array into `trainer`, which must have the same
/// parameter names and shapes. Nothing is modified if any check fails.
fn fill<T: Scalar>(trainer: &mut Trainer<T>, meta: &Metadata, data: &[u8]) -> Result<()> {
    let mut staged = Vec::with_capacity(meta.arrays.len());
    for entry in &meta.arrays {
        let id = trainer
            .model
            .store
            .find(&entry.name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {}", entry.name)))?;
        let target = trainer.model.store.value(id);
        check_shape(entry, target)?;
        if entry.kind == ArrayKind::Param && entry.frozen != trainer.model.store.get(id).frozen {
            return Err(Error::Format(format!("frozen flag of {} disagrees with the model", entry.name)));
        }
        staged.push((id, entry.kind, read_array::<T>(data, entry)?));
    }
    for (id, kind, m) in staged {
        match kind {
            ArrayKind::Param => trainer.model.store.get_mut(id).value = m,
            ArrayKind::AdamM => trainer.opt.m[id.index()] = m,
            ArrayKind::AdamV => trainer.opt.v[id.index()] = m,
        }
    }
    trainer.step = meta.step;
    trainer.opt.t = meta.optimizer_step;
    Ok(())
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Trainer<T>> {
    let (meta, data) = parse_header(bytes)?;
    let mut trainer = Trainer::new(meta.config.clone())?;
    let expected = trainer.model.store.len();
    let params = meta.arrays.iter().filter(|a| a.kind == ArrayKind::Param).count();
    if params != expected {
        return Err(Error::Format(format!("{params} parameter arrays stored, model has {expected}")));
    }
    fill(&mut trainer, &meta, data)?;
    Ok(trainer)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Trainer<T>> {
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads only the parameter arrays into an existing model, checking every
/// shape against it.
pub fn load_weights_into<T: Scalar>(path: &Path, model: &mut Model<T>) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (meta, data) = parse_header(&bytes)?;
    let mut staged = Vec::new();
    for entry in meta.arrays.iter().filter(|a| a.kind == ArrayKind::Param) {
        let id = model
            .store
            .find(&entry.name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {}", entry.name)))?;
        check_shape(entry, model.store.value(id))?;
        staged.push((id, read_array::<T>(data, entry)?));
    }
    for (id, m) in staged {
        model.store.get_mut(id).value = m;
    }
    Ok(())
}
