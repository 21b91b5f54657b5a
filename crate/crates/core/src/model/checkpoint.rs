//! Checkpoint files.
//!
//! Layout: the magic bytes `MVT1`, a little-endian `u32` header length, a
//! UTF-8 JSON header `{format_version, config, tensors: [{name, shape,
//! offset}]}`, then every tensor as contiguous little-endian `f32` values in
//! table order. `offset` is the byte offset of a tensor's payload measured
//! from the first payload byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Parameters, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MVT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

pub fn encode_checkpoint(params: &ParamStore, cfg: &ModelConfig) -> Result<Vec<u8>> {
    params.check_layout(cfg)?;
    let mut offset = 0u64;
    let tensors = params
        .named_tensors()
        .into_iter()
        .map(|(name, t)| {
            let entry = TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 4 * t.numel() as u64;
            entry
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        tensors,
    })
    .expect("checkpoint header serializes");

    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in params.named_tensors() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(ParamStore, ModelConfig)> {
    let format = |offset: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 8 {
        return Err(format(bytes.len(), "file ends inside the fixed preamble".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(format(0, format!("bad magic {:?}, expected \"MVT1\"", &bytes[..4])));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let payload_start = 8 + header_len;
    if bytes.len() < payload_start {
        return Err(format(bytes.len(), format!("file ends inside the {header_len}-byte header")));
    }
    let header: Header = serde_json::from_slice(&bytes[8..payload_start])
        .map_err(|e| format(8 + e.column().saturating_sub(1), format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(format(8, format!("unsupported format version {}", header.format_version)));
    }
    header
        .config
        .validate()
        .map_err(|e| format(8, format!("header config: {e}")))?;

    let cfg = header.config;
    let mut params = ParamStore::zeros(&cfg);
    let expected = params.names();
    if expected.len() != header.tensors.len() {
        return Err(format(
            8,
            format!("tensor table has {} entries, config implies {}", header.tensors.len(), expected.len()),
        ));
    }
    let payload = &bytes[payload_start..];
    for ((entry, want), t) in header.tensors.iter().zip(&expected).zip(params.tensors_mut()) {
        if &entry.name != want || entry.shape != t.shape() {
            return Err(format(
                8,
                format!("tensor {} {:?} does not match layout entry {want} {:?}", entry.name, entry.shape, t.shape()),
            ));
        }
        let start = entry.offset as usize;
        let end = start + 4 * t.numel();
        if end > payload.len() {
            return Err(format(
                payload_start + payload.len(),
                format!("truncated payload for {} (needs bytes {start}..{end})", entry.name),
            ));
        }
        let values: Vec<f64> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        *t = Tensor::new(t.shape().to_vec(), values)?;
    }
    Ok((params, cfg))
}

pub fn save_checkpoint(params: &ParamStore, cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(params, cfg)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParamStore, ModelConfig)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
