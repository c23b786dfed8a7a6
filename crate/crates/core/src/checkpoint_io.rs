//! Single-file checkpoint container: an 8-byte magic, a little-endian u64
//! manifest length, a JSON manifest (config, prune metadata, tensor index),
//! then the raw little-endian f32 tensor blobs, row-major, in index order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, LayerWeights, ModelConfig, PruneMeta};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GBSPCKP1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of this tensor's blob, relative to the end of the manifest.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub prune_meta: Option<PruneMeta>,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(ckpt: &Checkpoint<f32>, path: &Path) -> Result<()> {
    let named = ckpt.named_tensors();
    let mut tensors = Vec::with_capacity(named.len());
    let mut offset = 0u64;
    for (name, t) in &named {
        tensors.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
        offset += 4 * t.len() as u64;
    }
    let manifest = Manifest {
        config: ckpt.config.clone(),
        prune_meta: ckpt.prune_meta.clone(),
        tensors,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    for (_, t) in &named {
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::CheckpointFormat(format!(
            "bad magic {magic:?} in {}",
            path.display()
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let manifest_len = u64::from_le_bytes(len) as usize;
    let mut buf = vec![0u8; manifest_len];
    r.read_exact(&mut buf)?;
    Ok(serde_json::from_slice(&buf)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::CheckpointFormat(format!(
            "bad magic {magic:?} in {}",
            path.display()
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let manifest_len = u64::from_le_bytes(len) as usize;
    let mut buf = vec![0u8; manifest_len];
    r.read_exact(&mut buf)?;
    let manifest: Manifest = serde_json::from_slice(&buf)?;

    let mut expected = 0u64;
    let mut by_name = std::collections::HashMap::new();
    for entry in &manifest.tensors {
        if entry.offset != expected {
            return Err(Error::CheckpointFormat(format!(
                "tensor '{}' at offset {}, expected {}",
                entry.name, entry.offset, expected
            )));
        }
        let n: usize = entry.shape.iter().product();
        expected += 4 * n as u64;
        let mut bytes = vec![0u8; 4 * n];
        r.read_exact(&mut bytes).map_err(|e| {
            Error::CheckpointFormat(format!("truncated blob for '{}': {e}", entry.name))
        })?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        by_name.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    let mut take = |name: String| -> Result<Tensor<f32>> {
        by_name
            .remove(&name)
            .ok_or_else(|| Error::CheckpointFormat(format!("missing tensor '{name}'")))
    };
    let layers = (0..manifest.config.n_layers)
        .map(|i| {
            Ok(LayerWeights {
                q_proj: take(format!("layers.{i}.q_proj"))?,
                k_proj: take(format!("layers.{i}.k_proj"))?,
                v_proj: take(format!("layers.{i}.v_proj"))?,
                o_proj: take(format!("layers.{i}.o_proj"))?,
                ffn_gate: take(format!("layers.{i}.ffn_gate"))?,
                ffn_up: take(format!("layers.{i}.ffn_up"))?,
                ffn_down: take(format!("layers.{i}.ffn_down"))?,
                attn_norm: take(format!("layers.{i}.attn_norm"))?,
                ffn_norm: take(format!("layers.{i}.ffn_norm"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ckpt = Checkpoint {
        embed: take("embed".to_string())?,
        final_norm: take("final_norm".to_string())?,
        head: take("head".to_string())?,
        config: manifest.config,
        layers,
        prune_meta: manifest.prune_meta,
    };
    if !by_name.is_empty() {
        let extra: Vec<&String> = by_name.keys().collect();
        return Err(Error::CheckpointFormat(format!("unexpected tensors {extra:?}")));
    }
    Ok(ckpt)
}
