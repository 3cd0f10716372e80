//! Parameter checkpoints: a flat binary archive plus a JSON manifest.
//!
//! `<stem>.bin` layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "STTCKPT1"
//! count   u32
//! entry*  name_len u32 | name (utf-8) | rank u32 | dims u64 × rank | values f64 × prod(dims)
//! ```
//!
//! `<stem>.json` lists the entries in load order with their shapes.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Tensor;

const MAGIC: &[u8; 8] = b"STTCKPT1";
pub const FORMAT: &str = "stt-checkpoint-v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed checkpoint archive: {0}")]
    Archive(String),
    #[error("malformed checkpoint manifest: {0}")]
    Manifest(String),
    #[error("manifest and archive disagree: {0}")]
    Mismatch(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub numel: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub entries: Vec<ManifestEntry>,
    pub total_elements: usize,
}

impl Manifest {
    pub fn from_entries(entries: &[(String, Tensor)]) -> Self {
        let entries: Vec<ManifestEntry> = entries
            .iter()
            .map(|(name, t)| ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                numel: t.len(),
            })
            .collect();
        Self {
            format: FORMAT.to_string(),
            total_elements: entries.iter().map(|e| e.numel).sum(),
            entries,
        }
    }
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn archive_path(stem: &Path) -> PathBuf {
    with_suffix(stem, ".bin")
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    with_suffix(stem, ".json")
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Archive("bad magic".into()));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        read_exact(&mut r, &mut name)?;
        let name = String::from_utf8(name).map_err(|e| CheckpointError::Archive(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel.saturating_mul(8) > r.len() {
            return Err(CheckpointError::Archive(format!(
                "entry {name} needs {} bytes, {} left",
                numel * 8,
                r.len()
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Archive(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if !r.is_empty() {
        return Err(CheckpointError::Archive(format!("{} trailing bytes", r.len())));
    }
    Ok(out)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf)
        .map_err(|_| CheckpointError::Archive("unexpected end of archive".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Writes `<stem>.bin` and `<stem>.json`.
pub fn save(stem: &Path, entries: &[(String, Tensor)]) -> Result<Manifest, CheckpointError> {
    let manifest = Manifest::from_entries(entries);
    let bin = archive_path(stem);
    fs::write(&bin, encode(entries)).map_err(io_err(&bin))?;
    let json = manifest_path(stem);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    fs::write(&json, text).map_err(io_err(&json))?;
    Ok(manifest)
}

pub fn load_manifest(stem: &Path) -> Result<Manifest, CheckpointError> {
    let json = manifest_path(stem);
    let text = fs::read_to_string(&json).map_err(io_err(&json))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(CheckpointError::Manifest(format!("unknown format {:?}", manifest.format)));
    }
    Ok(manifest)
}

/// Reads both files and checks that they describe the same entries in the same order.
pub fn load(stem: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let manifest = load_manifest(stem)?;
    let bin = archive_path(stem);
    let entries = decode(&fs::read(&bin).map_err(io_err(&bin))?)?;
    let found = Manifest::from_entries(&entries);
    if found.entries != manifest.entries {
        let first = manifest
            .entries
            .iter()
            .zip(&found.entries)
            .find(|(a, b)| a != b)
            .map(|(a, _)| a.name.clone())
            .unwrap_or_else(|| format!("{} vs {} entries", manifest.entries.len(), found.entries.len()));
        return Err(CheckpointError::Mismatch(first));
    }
    Ok(entries)
}
