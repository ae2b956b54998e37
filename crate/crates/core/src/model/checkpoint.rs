//! Checkpoint container.
//!
//! ```text
//! "GRAFTCKP"                 8-byte magic
//! header_len                 u64, little-endian
//! header                     UTF-8 JSON: format_version, config, topology,
//!                            tensor manifest (name, shape, byte offset)
//! data                       f32 values, little-endian, manifest order
//! ```
//!
//! Manifest offsets are relative to the start of the data section.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DecoderBlock, Model, ModelConfig};
use crate::error::{GraftError, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"GRAFTCKP";
const PREAMBLE: u64 = 16;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    topology: Topology,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize, PartialEq, Debug)]
struct Topology {
    n_blocks: usize,
    post_ffn_norm: bool,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    model.validate()?;
    let mut offset = 0u64;
    let mut tensors = Vec::new();
    for (name, t) in model.params() {
        tensors.push(Entry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.numel() as u64;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        topology: Topology {
            n_blocks: model.blocks.len(),
            post_ffn_norm: model.config.post_ffn_norm,
        },
        tensors,
    };
    let header = serde_json::to_vec_pretty(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREAMBLE as usize + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in model.params() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < PREAMBLE as usize {
        return Err(GraftError::format(
            bytes.len() as u64,
            "file ends inside the 16-byte preamble",
        ));
    }
    if &bytes[..8] != MAGIC {
        return Err(GraftError::format(0, "not a checkpoint (bad magic)"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let data_start = PREAMBLE
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| {
            GraftError::format(
                bytes.len() as u64,
                format!("header of {header_len} bytes runs past end of file"),
            )
        })?;
    let header_bytes = &bytes[PREAMBLE as usize..data_start as usize];
    // Peek at the version before demanding the full schema.
    let raw: serde_json::Value = serde_json::from_slice(header_bytes)
        .map_err(|e| GraftError::format(PREAMBLE, format!("unreadable header: {e}")))?;
    match raw.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(GraftError::format(
                PREAMBLE,
                format!("unsupported format version {v} (expected {FORMAT_VERSION})"),
            ))
        }
        None => return Err(GraftError::format(PREAMBLE, "header has no format_version")),
    }
    let header: Header = serde_json::from_value(raw)
        .map_err(|e| GraftError::format(PREAMBLE, format!("malformed header: {e}")))?;
    header
        .config
        .validate()
        .map_err(|e| GraftError::format(PREAMBLE, e.to_string()))?;
    let cfg = header.config;
    if header.topology
        != (Topology {
            n_blocks: cfg.n_layers,
            post_ffn_norm: cfg.post_ffn_norm,
        })
    {
        return Err(GraftError::format(PREAMBLE, "topology disagrees with config"));
    }

    let data = &bytes[data_start as usize..];
    let read = |name: &str| -> Result<Tensor> {
        let entry = header
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| GraftError::format(PREAMBLE, format!("manifest lacks tensor {name}")))?;
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset;
        let end = start + 4 * numel as u64;
        if end > data.len() as u64 {
            return Err(GraftError::format(
                data_start + data.len() as u64,
                format!(
                    "truncated: tensor {name} needs data bytes {start}..{end} but only {} are present",
                    data.len()
                ),
            ));
        }
        let values = data[start as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(entry.shape.clone(), values)
            .map_err(|e| GraftError::format(data_start + start, format!("tensor {name}: {e}")))
    };

    let token_embedding = read("token_embedding")?;
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let get = |n: &str| read(&format!("blocks.{i}.{n}"));
        blocks.push(DecoderBlock {
            w_q: get("w_q")?,
            w_k: get("w_k")?,
            w_v: get("w_v")?,
            w_o: get("w_o")?,
            w_1: get("w_1")?,
            w_2: get("w_2")?,
            w_3: get("w_3")?,
            attn_norm: get("attn_norm")?,
            ffn_norm: get("ffn_norm")?,
            post_ffn_norm: if cfg.post_ffn_norm {
                Some(get("post_ffn_norm")?)
            } else {
                None
            },
        });
    }
    let final_norm = read("final_norm")?;
    let lm_head = read("lm_head")?;
    let expected = 3 + blocks.iter().map(|b| b.tensors().len()).sum::<usize>();
    if header.tensors.len() != expected {
        return Err(GraftError::format(
            PREAMBLE,
            format!(
                "manifest lists {} tensors, topology has {expected}",
                header.tensors.len()
            ),
        ));
    }
    let model = Model {
        config: cfg,
        token_embedding,
        blocks,
        final_norm,
        lm_head,
    };
    model
        .validate()
        .map_err(|e| GraftError::format(PREAMBLE, e.to_string()))?;
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &to_bytes(model)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| GraftError::io(path, e))?;
    from_bytes(&bytes)
}
