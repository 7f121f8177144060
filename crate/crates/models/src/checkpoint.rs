//! Checkpoint file format.
//!
//! Layout: magic "NVCK", u32 version, u32 header length, header JSON
//! (architecture, train-config digest, experiment digest, epoch), u32 tensor
//! count, then per tensor: u32 name length, name bytes, u32 rank, u32
//! extents, raw little-endian f32 data. Writes go through a temp file and a
//! rename, so a checkpoint is either complete or absent.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ArchitectureConfig;
use crate::params::{Component, ParamEntry, ParamKind, ParameterStore};
use crate::ModelError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub arch: ArchitectureConfig,
    pub train_digest: String,
    pub experiment_digest: String,
    pub epoch: usize,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ModelError + '_ {
    move |e| ModelError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

pub fn save_checkpoint(
    path: &Path,
    header: &CheckpointHeader,
    store: &ParameterStore,
) -> Result<(), ModelError> {
    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp).map_err(io_err(&tmp))?;
        let mut w = BufWriter::new(file);
        w.write_all(CHECKPOINT_MAGIC).map_err(io_err(&tmp))?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err(&tmp))?;
        let header_json = serde_json::to_vec(header)?;
        w.write_all(&(header_json.len() as u32).to_le_bytes())
            .map_err(io_err(&tmp))?;
        w.write_all(&header_json).map_err(io_err(&tmp))?;
        w.write_all(&(store.len() as u32).to_le_bytes())
            .map_err(io_err(&tmp))?;
        for entry in store.entries() {
            let name = entry.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err(&tmp))?;
            w.write_all(name).map_err(io_err(&tmp))?;
            w.write_all(&(entry.tensor.shape.len() as u32).to_le_bytes())
                .map_err(io_err(&tmp))?;
            for &d in &entry.tensor.shape {
                w.write_all(&(d as u32).to_le_bytes()).map_err(io_err(&tmp))?;
            }
            for &v in &entry.tensor.data {
                w.write_all(&v.to_le_bytes()).map_err(io_err(&tmp))?;
            }
        }
        w.flush().map_err(io_err(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

fn component_of(name: &str) -> Result<Component, ModelError> {
    if name.starts_with("enc.") {
        Ok(Component::Encoder)
    } else if name.starts_with("dec.") {
        Ok(Component::Decoder)
    } else {
        Err(ModelError::Checkpoint(format!(
            "parameter {name} has no component prefix"
        )))
    }
}

fn kind_of(name: &str) -> ParamKind {
    if name.ends_with(".run_mean") || name.ends_with(".run_var") {
        ParamKind::State
    } else {
        ParamKind::Weight
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParameterStore), ModelError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint(format!(
            "{}: bad magic",
            path.display()
        )));
    }
    let mut u32_buf = [0u8; 4];
    r.read_exact(&mut u32_buf).map_err(io_err(path))?;
    let version = u32::from_le_bytes(u32_buf);
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    r.read_exact(&mut u32_buf).map_err(io_err(path))?;
    let header_len = u32::from_le_bytes(u32_buf) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json).map_err(io_err(path))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)?;

    r.read_exact(&mut u32_buf).map_err(io_err(path))?;
    let count = u32::from_le_bytes(u32_buf) as usize;
    let mut store = ParameterStore::default();
    for _ in 0..count {
        r.read_exact(&mut u32_buf).map_err(io_err(path))?;
        let name_len = u32::from_le_bytes(u32_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io_err(path))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| ModelError::Checkpoint(format!("{}: bad name", path.display())))?;
        r.read_exact(&mut u32_buf).map_err(io_err(path))?;
        let rank = u32::from_le_bytes(u32_buf) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u32_buf).map_err(io_err(path))?;
            shape.push(u32::from_le_bytes(u32_buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw).map_err(io_err(path))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let component = component_of(&name)?;
        let kind = kind_of(&name);
        store.push(ParamEntry {
            name,
            component,
            kind,
            tensor: neurovol_tensor::Tensor::new(shape, data)
                .map_err(|e| ModelError::Checkpoint(e.to_string()))?,
        })?;
    }
    Ok((header, store))
}

/// Rejects a checkpoint whose architecture differs from the expected one,
/// reporting both digests.
pub fn check_architecture(
    header: &CheckpointHeader,
    expected: &ArchitectureConfig,
) -> Result<(), ModelError> {
    let have = header.arch.content_digest();
    let want = expected.content_digest();
    if have != want {
        return Err(ModelError::Checkpoint(format!(
            "architecture mismatch: checkpoint digest {have}, config digest {want}"
        )));
    }
    Ok(())
}
