//! Raw tensor files and parameter checkpoints.
//!
//! A tensor file is the rank as a little-endian `u32`, one `u32` per extent,
//! then the row-major data as little-endian `f64`. A checkpoint directory holds
//! `manifest.json` listing each tensor's name, shape and file.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAX_RANK: u32 = 16;
pub const MANIFEST_FORMAT: &str = "numkernel-params-v1";

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    let rank = u32::try_from(t.rank()).map_err(|_| Error::Format("rank too large".into()))?;
    w.write_all(&rank.to_le_bytes())?;
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::Format(format!("extent {e} exceeds u32")))?;
        w.write_all(&e.to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let rank = read_u32(r)?;
    if rank > MAX_RANK {
        return Err(Error::Format(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut len: usize = 1;
    for _ in 0..rank {
        let e = read_u32(r)? as usize;
        len = len
            .checked_mul(e)
            .ok_or_else(|| Error::Format("element count overflows".into()))?;
        shape.push(e);
    }
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("truncated data for shape {shape:?}: {e}")))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(&shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(fs::File::open(path)?);
    read_tensor(&mut r)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamManifest {
    pub format: String,
    pub tensors: Vec<ManifestEntry>,
}

pub fn save_params(store: &ParamStore, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::with_capacity(store.len());
    for (id, name, t) in store.iter() {
        let file = format!("t{:04}.bin", id.index());
        save_tensor(dir.join(&file), t)?;
        tensors.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = ParamManifest {
        format: MANIFEST_FORMAT.to_string(),
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load_params(dir: impl AsRef<Path>) -> Result<ParamStore> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: ParamManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Format(format!(
            "unknown manifest format {}",
            manifest.format
        )));
    }
    let mut store = ParamStore::new();
    for entry in manifest.tensors {
        let t = load_tensor(dir.join(&entry.file))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!(
                "{}: manifest shape {:?} but file holds {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        store.add(entry.name, t);
    }
    Ok(store)
}

/// Overwrites `store`'s tensors with a checkpoint's, requiring identical names and shapes.
pub fn load_params_into(store: &mut ParamStore, dir: impl AsRef<Path>) -> Result<()> {
    let loaded = load_params(dir)?;
    if loaded.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model expects {}",
            loaded.len(),
            store.len()
        )));
    }
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let src = loaded
            .find(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
        let t = loaded.get(src);
        if t.shape() != store.get(id).shape() {
            return Err(Error::Format(format!(
                "{name}: checkpoint shape {:?}, model shape {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t.clone();
    }
    Ok(())
}
