//! Single-file model archive.
//!
//! Layout:
//!
//! ```text
//! b"RSCVAECK"            8-byte magic
//! u32 LE                 format version (1)
//! u64 LE                 header length H
//! H bytes                JSON header
//! payload                concatenated little-endian tensor data
//! ```
//!
//! The header holds the encoder and decoder specs, the run config snapshot, the
//! completed-epoch counter, and a tensor index of `{name, shape, dtype, offset, len}`
//! entries whose offsets are relative to the start of the payload. Parameters and
//! batch-norm running statistics are both stored, so a loaded model reproduces
//! evaluation outputs bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::networks::{DecoderSpec, EncoderSpec, Vae};
use crate::nn::Slot;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"RSCVAECK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub encoder: EncoderSpec,
    pub decoder: DecoderSpec,
    pub config: Option<RunConfig>,
    pub epoch: u64,
    pub tensors: Vec<TensorEntry>,
}

pub struct Checkpoint<T> {
    pub model: Vae<T>,
    pub config: Option<RunConfig>,
    pub epoch: u64,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn encode_values<T: Real>(t: &Tensor<T>, dtype: &str, out: &mut Vec<u8>) {
    for &v in t.data() {
        match dtype {
            "f32" => out.extend_from_slice(&(v.f64() as f32).to_le_bytes()),
            _ => out.extend_from_slice(&v.f64().to_le_bytes()),
        }
    }
}

pub fn to_bytes<T: Real>(model: &mut Vae<T>, config: Option<&RunConfig>, epoch: u64) -> Result<Vec<u8>> {
    let dtype = T::NAME.to_string();
    let width = if dtype == "f32" { 4 } else { 8 };
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    model.visit(&mut |name, slot| {
        let t = match slot {
            Slot::Param(p) => &p.value,
            Slot::Buffer(b) => &*b,
        };
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: dtype.clone(),
            offset: payload.len() as u64,
            len: (t.len() * width) as u64,
        });
        encode_values(t, &dtype, &mut payload);
    });
    let header = Header {
        encoder: model.encoder.spec().clone(),
        decoder: model.decoder.spec().clone(),
        config: config.cloned(),
        epoch,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| ck(format!("header serialization: {e}")))?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(ck("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(ck(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(ck("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| ck(format!("bad header: {e}")))?;
    Ok((header, &body[hlen..]))
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (header, payload) = read_header(bytes)?;
    header.decoder.check_pairs_with(&header.encoder)?;
    let mut model = Vae::<T>::new_unchecked(&header.encoder, 0)?;
    let mut index = std::collections::HashMap::new();
    for e in &header.tensors {
        index.insert(e.name.clone(), e);
    }
    let mut seen = 0;
    let mut failure: Option<Error> = None;
    model.visit(&mut |name, slot| {
        if failure.is_some() {
            return;
        }
        let target = match slot {
            Slot::Param(p) => &mut p.value,
            Slot::Buffer(b) => b,
        };
        let Some(e) = index.get(name) else {
            failure = Some(ck(format!("tensor {name} missing from checkpoint")));
            return;
        };
        if e.shape != target.shape() {
            failure = Some(ck(format!("tensor {name} has shape {:?}, model expects {:?}", e.shape, target.shape())));
            return;
        }
        let width = match e.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => {
                failure = Some(ck(format!("tensor {name} has unsupported dtype {other}")));
                return;
            }
        };
        let (start, len) = (e.offset as usize, e.len as usize);
        if len != target.len() * width || start.checked_add(len).is_none_or(|end| end > payload.len()) {
            failure = Some(ck(format!("tensor {name} lies outside the payload")));
            return;
        }
        for (dst, chunk) in target.data_mut().iter_mut().zip(payload[start..start + len].chunks_exact(width)) {
            *dst = if width == 4 {
                T::c(f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64)
            } else {
                T::c(f64::from_le_bytes(chunk.try_into().expect("8 bytes")))
            };
        }
        seen += 1;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if seen != header.tensors.len() {
        return Err(ck(format!(
            "checkpoint holds {} tensors but the model has {seen}",
            header.tensors.len()
        )));
    }
    Ok(Checkpoint {
        model,
        config: header.config,
        epoch: header.epoch,
    })
}

pub fn save<T: Real>(path: &Path, model: &mut Vae<T>, config: Option<&RunConfig>, epoch: u64) -> Result<()> {
    let bytes = to_bytes(model, config, epoch)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
