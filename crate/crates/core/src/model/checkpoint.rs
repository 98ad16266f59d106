//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `TCNCKPT\0`, a little-endian `u32` header length,
//! a JSON header (format tag, [`TcnConfig`], head class ids, and the ordered
//! list of tensor names and shapes), then every tensor as row-major
//! little-endian `f32` in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_model, ModelParams, TcnConfig};
use crate::error::{CilError, Result};

const MAGIC: &[u8; 8] = b"TCNCKPT\0";
pub const CHECKPOINT_FORMAT: &str = "tcn-checkpoint/1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: TcnConfig,
    classes: Vec<usize>,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint<W: Write>(params: &ModelParams, mut out: W) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload = Vec::with_capacity(params.num_params() * 4);
    params.visit(&mut |name, shape, data| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
        });
        for &v in data {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    });
    let header = serde_json::to_vec(&Header {
        format: CHECKPOINT_FORMAT.to_string(),
        config: params.config.clone(),
        classes: params.classes.clone(),
        tensors,
    })?;
    let io = |e| CilError::io("<checkpoint>", e);
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
    out.write_all(&header).map_err(io)?;
    out.write_all(&payload).map_err(io)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| CilError::io("<checkpoint>", e))?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(CilError::Checkpoint("bad magic".into()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + header_len;
    let header: Header = serde_json::from_slice(
        bytes
            .get(12..header_end)
            .ok_or_else(|| CilError::Checkpoint("truncated header".into()))?,
    )?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(CilError::Checkpoint(format!(
            "unsupported format {:?}",
            header.format
        )));
    }

    let mut params = init_model(&header.config, &header.classes, 0)?.zeros_like();
    let mut values = bytes[header_end..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())));
    let mut entries = header.tensors.iter();
    let mut failure = None;
    params.visit_mut(&mut |name, shape, data| {
        if failure.is_some() {
            return;
        }
        match entries.next() {
            Some(e) if e.name == name && e.shape == shape => {
                for slot in data.iter_mut() {
                    match values.next() {
                        Some(v) => *slot = v,
                        None => {
                            failure = Some(format!("payload ends inside {name}"));
                            return;
                        }
                    }
                }
            }
            Some(e) => {
                failure = Some(format!(
                    "expected {name} {shape:?}, found {} {:?}",
                    e.name, e.shape
                ))
            }
            None => failure = Some(format!("missing tensor {name}")),
        }
    });
    if let Some(msg) = failure {
        return Err(CilError::Checkpoint(msg));
    }
    if entries.next().is_some() || values.next().is_some() {
        return Err(CilError::Checkpoint("trailing tensors or payload".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| CilError::io(path, e))?;
    write_checkpoint(params, std::io::BufWriter::new(file))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| CilError::io(path, e))?;
    read_checkpoint(file)
}
