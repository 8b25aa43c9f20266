//! Checkpoint serialization.
//!
//! A checkpoint file is a single JSON manifest followed immediately by the
//! raw tensor payloads — no magic bytes and no length prefix. The manifest
//! carries the model config, the step counter, and a name → entry map whose
//! offsets are relative to the first byte after the manifest. Readers find
//! that boundary by asking the streaming JSON deserializer how many bytes
//! the manifest consumed. Payloads are row-major little-endian f32 in the
//! map's (lexicographic) key order.
//!
//! Parameter tensors use their canonical names; optimizer state rides along
//! as `opt.m.<name>` / `opt.v.<name>`. Loading for inference simply ignores
//! the `opt.` entries.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// One tensor's manifest entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    /// (rows, cols)
    pub shape: [usize; 2],
    /// Always "f32".
    pub dtype: String,
    /// Byte offset of this tensor's payload, relative to the end of the
    /// manifest.
    pub offset: usize,
}

/// The JSON header at the front of every checkpoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub step: usize,
    pub total_steps: usize,
    pub tensors: BTreeMap<String, TensorEntry>,
}

/// A fully parsed checkpoint.
#[derive(Debug, Clone)]
pub struct CheckpointData {
    pub config: ModelConfig,
    pub step: usize,
    pub total_steps: usize,
    pub params: ModelParams,
    /// Optimizer tensors keyed by their full checkpoint name
    /// (`opt.m.embed.token`, ...). Empty when the checkpoint carries none.
    pub opt: BTreeMap<String, Tensor>,
}

fn tensor_bytes(t: &Tensor) -> usize {
    t.len() * 4
}

/// Write a checkpoint. `extra` tensors (optimizer state) are merged with the
/// parameters into one name-keyed map; offsets follow map order.
pub fn save_checkpoint<P: AsRef<Path>>(
    path: P,
    config: &ModelConfig,
    step: usize,
    total_steps: usize,
    params: &ModelParams,
    extra: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let mut all: BTreeMap<&str, &Tensor> = BTreeMap::new();
    for (i, name) in params.names().iter().enumerate() {
        all.insert(name, params.tensor(i));
    }
    for (name, t) in extra {
        if all.insert(name, t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor name `{name}`")));
        }
    }

    let mut tensors = BTreeMap::new();
    let mut offset = 0usize;
    for (&name, &t) in &all {
        tensors.insert(
            name.to_string(),
            TensorEntry { shape: [t.rows, t.cols], dtype: "f32".into(), offset },
        );
        offset += tensor_bytes(t);
    }
    let manifest = Manifest {
        config: config.clone(),
        step,
        total_steps,
        tensors,
    };

    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &manifest)?;
    for (_, &t) in &all {
        let mut buf = Vec::with_capacity(tensor_bytes(t));
        for &v in &t.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

/// Parse a checkpoint file: manifest, then payloads located by offset.
pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<CheckpointData> {
    let mut bytes = Vec::new();
    File::open(&path)?.read_to_end(&mut bytes)?;

    let mut stream = serde_json::Deserializer::from_slice(&bytes).into_iter::<Manifest>();
    let manifest = match stream.next() {
        Some(Ok(m)) => m,
        Some(Err(e)) => return Err(Error::Checkpoint(format!("unreadable manifest: {e}"))),
        None => return Err(Error::Checkpoint("empty checkpoint file".into())),
    };
    let payload = &bytes[stream.byte_offset()..];

    let expected: usize = manifest.tensors.values().map(|e| e.shape[0] * e.shape[1] * 4).sum();
    if payload.len() != expected {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, manifest expects {expected}",
            payload.len()
        )));
    }

    let mut named: HashMap<String, Tensor> = HashMap::new();
    let mut opt = BTreeMap::new();
    for (name, entry) in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has unsupported dtype `{}`",
                entry.dtype
            )));
        }
        let n = entry.shape[0] * entry.shape[1];
        let end = entry.offset.checked_add(n * 4).filter(|&e| e <= payload.len());
        let end = end.ok_or_else(|| {
            Error::Checkpoint(format!("tensor `{name}` payload out of bounds"))
        })?;
        let slice = &payload[entry.offset..end];
        let data: Vec<f64> = slice
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::from_vec(entry.shape[0], entry.shape[1], data);
        if let Some(rest) = name.strip_prefix("opt.") {
            if !(rest.starts_with("m.") || rest.starts_with("v.")) {
                return Err(Error::Checkpoint(format!("unrecognized optimizer tensor `{name}`")));
            }
            opt.insert(name.clone(), t);
        } else {
            named.insert(name.clone(), t);
        }
    }

    let params = ModelParams::from_named(&manifest.config, named)?;
    Ok(CheckpointData {
        config: manifest.config,
        step: manifest.step,
        total_steps: manifest.total_steps,
        params,
        opt,
    })
}
