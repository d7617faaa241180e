//! Binary checkpoint container.
//!
//! ```text
//! "AURC" | version: u32 LE | header_len: u64 LE | JSON header | payload
//! ```
//!
//! The header maps each tensor name to its dtype (`f32` or `q4_sym_b<block>`),
//! shape and byte range inside the payload, and carries the model, adapter
//! and training configs plus the data-order state. Tensors are laid out in
//! name order so identical states produce identical files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::model::{BaseWeight, ModelConfig, MoeTransformer};
use crate::optim::QuantizedOptimState;
use crate::quant::QuantizedMatrix;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"AURC";
pub const VERSION: u32 = 1;
const PREFIX: usize = 16;
const F32: &str = "f32";
const Q4_PREFIX: &str = "q4_sym_b";
const OPT_M: &str = "opt.m.";
const OPT_V: &str = "opt.v.";

/// Where training stands: optimizer steps taken and the data-order cursor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: usize,
    /// Samples of the current epoch's permutation already consumed.
    pub position: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: MoeTransformer,
    pub train: Option<TrainConfig>,
    pub state: Option<TrainState>,
    /// Adam moments keyed by parameter name.
    pub optimizer: BTreeMap<String, QuantizedOptimState>,
}

impl Checkpoint {
    pub fn from_model(model: MoeTransformer) -> Self {
        Checkpoint {
            model,
            train: None,
            state: None,
            optimizer: BTreeMap::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    trainable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    step: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    #[serde(default)]
    lora: Option<LoraConfig>,
    #[serde(default)]
    train: Option<TrainConfig>,
    #[serde(default)]
    state: Option<TrainState>,
    tensors: BTreeMap<String, Entry>,
}

enum Blob {
    F32(Vec<f32>),
    Q4(Vec<u8>),
}

fn q4_dtype(q: &QuantizedMatrix) -> Result<String> {
    if !q.codebook.is_linear() {
        return Err(Error::Config(
            "only the linear symmetric codebook can be serialized".into(),
        ));
    }
    Ok(format!("{Q4_PREFIX}{}", q.block_size))
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let model = &ckpt.model;
    let mut items: BTreeMap<String, (String, Vec<usize>, bool, Option<u64>, Blob)> = BTreeMap::new();
    model.visit_tensors(&mut |name, t| {
        items.insert(
            name.to_string(),
            (F32.into(), t.shape.clone(), t.requires_grad, None, Blob::F32(t.data.clone())),
        );
    });
    let mut quantized = Vec::new();
    model.visit_linears(&mut |name, lin| {
        if let BaseWeight::Quantized(q) = &lin.weight {
            quantized.push((format!("{name}.weight"), q.clone()));
        }
    });
    for (name, q) in quantized {
        items.insert(name, (q4_dtype(&q)?, vec![q.rows, q.cols], false, None, Blob::Q4(q.to_bytes())));
    }
    for (name, st) in &ckpt.optimizer {
        for (prefix, q, step) in [(OPT_M, &st.m, Some(st.step)), (OPT_V, &st.v, None)] {
            items.insert(
                format!("{prefix}{name}"),
                (q4_dtype(q)?, vec![q.rows, q.cols], false, step, Blob::Q4(q.to_bytes())),
            );
        }
    }

    let mut tensors = BTreeMap::new();
    let mut payload = Vec::new();
    for (name, (dtype, shape, trainable, step, blob)) in items {
        let offset = payload.len() as u64;
        match blob {
            Blob::F32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
            Blob::Q4(b) => payload.extend_from_slice(&b),
        }
        let length = payload.len() as u64 - offset;
        tensors.insert(
            name,
            Entry {
                dtype,
                shape,
                offset,
                length,
                trainable,
                step,
            },
        );
    }
    let header = Header {
        model: model.config.clone(),
        lora: model.lora.clone(),
        train: ckpt.train.clone(),
        state: ckpt.state,
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREFIX + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

fn truncated(what: &str) -> Error {
    Error::Integrity(format!("checkpoint truncated: {what}"))
}

fn block_size_of(dtype: &str) -> Option<usize> {
    dtype.strip_prefix(Q4_PREFIX)?.parse().ok().filter(|&b| b > 0)
}

fn q4_from(name: &str, e: &Entry, data: &[u8]) -> Result<QuantizedMatrix> {
    let bs = block_size_of(&e.dtype)
        .ok_or_else(|| Error::Format(format!("{name}: unsupported dtype {:?}", e.dtype)))?;
    let [rows, cols] = e.shape[..] else {
        return Err(Error::Integrity(format!("{name}: q4 tensors are 2-d, got {:?}", e.shape)));
    };
    QuantizedMatrix::from_bytes(rows, cols, bs, data)
        .map_err(|err| Error::Integrity(format!("{name}: {err}")))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        if bytes.len() < MAGIC.len() && MAGIC.starts_with(bytes) {
            return Err(truncated("magic"));
        }
        return Err(Error::Format("bad magic, not a checkpoint".into()));
    }
    if bytes.len() < PREFIX {
        return Err(truncated("prefix"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let hend = (PREFIX as u64)
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| truncated("header"))? as usize;
    let header: Header = serde_json::from_slice(&bytes[PREFIX..hend])
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let payload = &bytes[hend..];
    let slice = |name: &str, e: &Entry| -> Result<&[u8]> {
        let end = e.offset.checked_add(e.length).ok_or_else(|| truncated(name))?;
        if end > payload.len() as u64 {
            return Err(truncated(name));
        }
        Ok(&payload[e.offset as usize..end as usize])
    };

    let mut model = MoeTransformer::new(header.model.clone(), 0)?;
    if let Some(cfg) = &header.lora {
        model.attach_lora(cfg.clone(), 0)?;
    }
    let mut used = BTreeSet::new();
    let mut err: Option<Error> = None;
    model.visit_linears_mut(&mut |name, lin| {
        if err.is_some() {
            return;
        }
        let key = format!("{name}.weight");
        let Some(e) = header.tensors.get(&key) else {
            return;
        };
        if e.dtype == F32 {
            return;
        }
        let res = slice(&key, e).and_then(|data| q4_from(&key, e, data));
        match res {
            Ok(q) => {
                lin.weight = BaseWeight::Quantized(q);
                used.insert(key);
            }
            Err(x) => err = Some(x),
        }
    });
    model.visit_tensors_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        let res = (|| -> Result<()> {
            let e = header
                .tensors
                .get(name)
                .ok_or_else(|| Error::Integrity(format!("missing tensor {name}")))?;
            if e.dtype != F32 {
                return Err(Error::Integrity(format!("{name}: expected f32, found {}", e.dtype)));
            }
            if e.shape != t.shape {
                return Err(Error::Integrity(format!(
                    "{name}: config implies {:?}, file declares {:?}",
                    t.shape, e.shape
                )));
            }
            let data = slice(name, e)?;
            if data.len() != 4 * t.numel() {
                return Err(Error::Integrity(format!("{name}: {} bytes for {:?}", data.len(), e.shape)));
            }
            for (dst, c) in t.data.iter_mut().zip(data.chunks_exact(4)) {
                *dst = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
            t.requires_grad = e.trainable;
            Ok(())
        })();
        match res {
            Ok(()) => {
                used.insert(name.to_string());
            }
            Err(x) => err = Some(x),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    model.check_shapes()?;

    let mut optimizer = BTreeMap::new();
    for (key, e) in &header.tensors {
        if let Some(name) = key.strip_prefix(OPT_M) {
            let vkey = format!("{OPT_V}{name}");
            let ve = header
                .tensors
                .get(&vkey)
                .ok_or_else(|| Error::Integrity(format!("missing tensor {vkey}")))?;
            let m = q4_from(key, e, slice(key, e)?)?;
            let v = q4_from(&vkey, ve, slice(&vkey, ve)?)?;
            if m.shape() != v.shape() {
                return Err(Error::Integrity(format!("{name}: moment shapes differ")));
            }
            optimizer.insert(
                name.to_string(),
                QuantizedOptimState {
                    step: e.step.unwrap_or(0),
                    m,
                    v,
                },
            );
            used.insert(key.clone());
            used.insert(vkey);
        }
    }
    if let Some(extra) = header.tensors.keys().find(|k| !used.contains(*k)) {
        return Err(Error::Integrity(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        model,
        train: header.train,
        state: header.state,
        optimizer,
    })
}
