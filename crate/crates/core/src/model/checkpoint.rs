//! Binary checkpoints.
//!
//! Layout: a little-endian `u64` byte length, a JSON manifest of that length
//! (`{"config": .., "tensors": [{"name", "shape", "byte_offset"}]}`), then every
//! tensor as raw little-endian `f64` values in directory order. Offsets are
//! relative to the start of that body.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    byte_offset: u64,
}

/// Cap on the manifest size, so a corrupt prefix cannot trigger a huge allocation.
const MAX_MANIFEST: u64 = 64 << 20;

pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<()> {
    let mut offset = 0u64;
    let tensors = model
        .params()
        .iter()
        .map(|(name, t)| {
            let e = Entry { name: name.to_string(), shape: t.shape().to_vec(), byte_offset: offset };
            offset += 8 * t.numel() as u64;
            e
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest { config: model.config().clone(), tensors })?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(&manifest)?;
    for (_, t) in model.params().iter() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Model> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|e| Error::Checkpoint(format!("missing header: {e}")))?;
    let len = u64::from_le_bytes(len);
    if len > MAX_MANIFEST {
        return Err(Error::Checkpoint(format!("manifest length {len} is implausible")));
    }
    let mut manifest = vec![0u8; len as usize];
    r.read_exact(&mut manifest).map_err(|e| Error::Checkpoint(format!("truncated manifest: {e}")))?;
    let manifest: Manifest =
        serde_json::from_slice(&manifest).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    let mut model = Model::new(manifest.config)?;
    if manifest.tensors.len() != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors for this config, found {}",
            model.params().len(),
            manifest.tensors.len()
        )));
    }
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    let mut seen = vec![false; model.params().len()];
    let mut end = 0usize;
    for entry in &manifest.tensors {
        let id = model
            .params()
            .find(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", entry.name)))?;
        if std::mem::replace(&mut seen[id.0], true) {
            return Err(Error::Checkpoint(format!("duplicate tensor {}", entry.name)));
        }
        let expected = model.params().get(id).shape();
        if entry.shape != expected {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, expected {:?}",
                entry.name, entry.shape, expected
            )));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.byte_offset as usize;
        let bytes = body
            .get(start..start + 8 * n)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the end of the file", entry.name)))?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        *model.params_mut().get_mut(id) = Tensor::new(entry.shape.clone(), data)?;
        end = end.max(start + 8 * n);
    }
    if end != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after tensor data", body.len() - end)));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
