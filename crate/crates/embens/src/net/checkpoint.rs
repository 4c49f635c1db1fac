//! Parameter checkpoints: a flat little-endian f64 blob plus a JSON header
//! carrying the shapes, the architecture, and the originating seed.

use super::{ArchSpec, EnsembleParams};
use crate::error::{Error, Result};
use crate::numerics::Seed;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: (usize, usize),
    /// Offset into the blob, in f64 elements.
    offset: usize,
}

/// The JSON header written next to the tensor blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub dtype: String,
    pub arch: ArchSpec,
    pub seed: Seed,
    tensors: Vec<TensorEntry>,
}

fn tensor_list(params: &EnsembleParams) -> Vec<(String, &Array2<f64>)> {
    let mut out = Vec::new();
    for (l, w) in params.weights.iter().enumerate() {
        out.push((format!("w{}", l + 1), w));
    }
    if let Some(t) = &params.input_mods {
        out.push(("u0".to_string(), t));
    }
    for (i, t) in params.pre_mods.iter().enumerate() {
        if let Some(t) = t {
            out.push((format!("v{}", i + 1), t));
        }
    }
    for (i, t) in params.post_mods.iter().enumerate() {
        if let Some(t) = t {
            out.push((format!("u{}", i + 1), t));
        }
    }
    if let Some(t) = &params.output_mods {
        out.push((format!("v{}", params.weights.len()), t));
    }
    out
}

/// Write `{base}.json` and `{base}.bin`.
pub fn save_checkpoint(
    base: &Path,
    params: &EnsembleParams,
    arch: &ArchSpec,
    seed: Seed,
) -> Result<()> {
    let tensors = tensor_list(params);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.dim(),
            offset,
        });
        for v in t.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    }
    let header = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        dtype: "f64le".to_string(),
        arch: arch.clone(),
        seed,
        tensors: entries,
    };
    let json = serde_json::to_string_pretty(&header)?;
    fs::write(base.with_extension("json"), json)?;
    let mut f = fs::File::create(base.with_extension("bin"))?;
    f.write_all(&blob)?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(base: &Path) -> Result<(EnsembleParams, ArchSpec, Seed)> {
    let json = fs::read_to_string(base.with_extension("json"))?;
    let header: Checkpoint = serde_json::from_str(&json)?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint version {}",
            header.format_version
        )));
    }
    let mut blob = Vec::new();
    fs::File::open(base.with_extension("bin"))?.read_to_end(&mut blob)?;

    let read_tensor = |entry: &TensorEntry| -> Result<Array2<f64>> {
        let (r, c) = entry.shape;
        let start = entry.offset * 8;
        let end = start + r * c * 8;
        if end > blob.len() {
            return Err(Error::Config(format!(
                "checkpoint blob too short for tensor {}",
                entry.name
            )));
        }
        let vals: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Array2::from_shape_vec((r, c), vals)
            .map_err(|e| Error::Config(format!("bad tensor shape: {e}")))
    };

    let arch = header.arch.clone();
    let depth = arch.depth();
    let find = |name: String| -> Option<&TensorEntry> {
        header.tensors.iter().find(|t| t.name == name)
    };

    let mut weights = Vec::with_capacity(depth + 1);
    for l in 1..=depth + 1 {
        let entry = find(format!("w{l}"))
            .ok_or_else(|| Error::Config(format!("checkpoint missing tensor w{l}")))?;
        weights.push(read_tensor(entry)?);
    }
    let input_mods = find("u0".to_string()).map(&read_tensor).transpose()?;
    let mut pre_mods = Vec::with_capacity(depth);
    let mut post_mods = Vec::with_capacity(depth);
    for i in 1..=depth {
        pre_mods.push(find(format!("v{i}")).map(&read_tensor).transpose()?);
        post_mods.push(find(format!("u{i}")).map(&read_tensor).transpose()?);
    }
    let output_mods = find(format!("v{}", depth + 1))
        .map(&read_tensor)
        .transpose()?;

    Ok((
        EnsembleParams {
            weights,
            pre_mods,
            post_mods,
            input_mods,
            output_mods,
        },
        arch,
        header.seed,
    ))
}
