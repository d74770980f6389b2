//! Checkpoint serialization: a little-endian binary blob for parameter
//! tensors plus a JSON manifest describing how the checkpoint was produced.
//!
//! Blob layout (version 1):
//!
//! ```text
//! magic   b"DTCK"
//! u32     format version
//! u64     parameter count
//! per parameter:
//!   u32     name length, then UTF-8 name bytes
//!   u8      trainable flag
//!   u32     rank, then u64 dims
//!   f32[]   row-major values
//! ```

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::numerics::Scalar;

const MAGIC: &[u8; 4] = b"DTCK";
const VERSION: u32 = 1;

/// Metadata saved next to a parameter blob as `<stem>.manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    /// What the checkpoint contains, e.g. `"dit"` or `"tracker"`.
    pub kind: String,
    /// Resolved configuration the producing run used.
    pub config: serde_json::Value,
    pub seed: u64,
    /// Training steps completed when the checkpoint was written.
    pub step: u64,
    /// Hash of the training corpus, if one was used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_hash: Option<String>,
}

fn manifest_path(blob: &Path) -> std::path::PathBuf {
    let stem = blob.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    blob.with_file_name(format!("{stem}.manifest.json"))
}

/// Writes the parameter blob and its manifest. Values are stored as `f32`
/// regardless of the store's scalar type.
pub fn save<S: Scalar>(store: &ParamStore<S>, manifest: &Manifest, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io_err)?;
    w.write_u64::<LittleEndian>(store.len() as u64).map_err(io_err)?;
    for (_, param) in store.iter() {
        let name = param.name.as_bytes();
        w.write_u32::<LittleEndian>(name.len() as u32).map_err(io_err)?;
        w.write_all(name).map_err(io_err)?;
        w.write_u8(param.trainable as u8).map_err(io_err)?;
        w.write_u32::<LittleEndian>(param.value.ndim() as u32).map_err(io_err)?;
        for &d in param.value.shape() {
            w.write_u64::<LittleEndian>(d as u64).map_err(io_err)?;
        }
        for &v in param.value.iter() {
            w.write_f32::<LittleEndian>(v.to_f64() as f32).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;

    let mpath = manifest_path(path);
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::CorruptArtifact { path: mpath.clone(), reason: e.to_string() })?;
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

/// Reads a parameter blob back into a store, restoring names, shapes, values
/// and trainability flags in their original order.
pub fn load(path: &Path) -> Result<(ParamStore<f32>, Manifest)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let corrupt = |reason: String| Error::CorruptArtifact { path: path.to_path_buf(), reason };
    let io_err = |e: std::io::Error| Error::CorruptArtifact {
        path: path.to_path_buf(),
        reason: format!("unexpected end of file: {e}"),
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic bytes, not a checkpoint".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io_err)?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported format version {version}, expected {VERSION}")));
    }
    let count = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
    let mut store = ParamStore::new();
    for i in 0..count {
        let name_len = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        if name_len > 4096 {
            return Err(corrupt(format!("parameter {i} has implausible name length {name_len}")));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf).map_err(io_err)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| corrupt(format!("parameter {i} name is not valid UTF-8")))?;
        if store.find(&name).is_some() {
            return Err(corrupt(format!("duplicate parameter name '{name}'")));
        }
        let trainable = r.read_u8().map_err(io_err)? != 0;
        let rank = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        if rank > 8 {
            return Err(corrupt(format!("parameter '{name}' has implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| corrupt(format!("parameter '{name}' dims overflow")))?;
            dims.push(d);
        }
        let mut data = vec![0f32; numel];
        for v in data.iter_mut() {
            *v = r.read_f32::<LittleEndian>().map_err(io_err)?;
        }
        let value = ArrayD::from_shape_vec(ndarray::IxDyn(&dims), data)
            .map_err(|e| corrupt(format!("parameter '{name}' shape error: {e}")))?;
        store.register(name, value, trainable);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io_err)? != 0 {
        return Err(corrupt("trailing bytes after last parameter".into()));
    }

    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::CorruptArtifact { path: mpath, reason: e.to_string() })?;
    Ok((store, manifest))
}

/// SHA-256 over a directory tree: relative paths (sorted) and file bytes.
/// Two corpora hash equal iff their layouts and contents match exactly.
pub fn dir_hash(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in &files {
        hasher.update(rel.as_bytes());
        hasher.update([0u8]);
        let full = root.join(rel);
        let bytes = std::fs::read(&full).map_err(|e| Error::io(&full, e))?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .map_err(|_| Error::invalid(format!("path {path:?} escapes corpus root")))?;
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}
