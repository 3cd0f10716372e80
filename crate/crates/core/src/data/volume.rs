//! Raw voxel file plus JSON sidecar.
//!
//! `<stem>.json` holds `{dims, dtype, voxel_size_nm, byte_order}` and
//! `<stem>.raw` the little-endian voxels in T-major, then H, then W order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stt_tensor::Tensor;
use thiserror::Error;

use crate::labels::LabelVolume;

pub const BYTE_ORDER: &str = "little-endian";

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("{path}: expected {expected} bytes, found {actual}")]
    LengthMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: unknown dtype {dtype:?} (expected f32, u8 or u32)")]
    UnknownDtype { path: PathBuf, dtype: String },
    #[error("{path}: malformed sidecar: {msg}")]
    MalformedSidecar { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Content(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
    U32,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::F32 | Self::U32 => 4,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Self::F32),
            "u8" => Some(Self::U8),
            "u32" => Some(Self::U32),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    dims: [usize; 3],
    dtype: String,
    voxel_size_nm: [f64; 3],
    byte_order: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum VoxelData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    U32(Vec<u32>),
}

impl VoxelData {
    pub fn dtype(&self) -> Dtype {
        match self {
            Self::F32(_) => Dtype::F32,
            Self::U8(_) => Dtype::U8,
            Self::U32(_) => Dtype::U32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::U8(v) => v.len(),
            Self::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub voxel_size_nm: [f64; 3],
    pub data: VoxelData,
}

/// Voxel size of the reference EM stacks, `(z, y, x)` in nanometres.
pub const DEFAULT_VOXEL_NM: [f64; 3] = [30.0, 8.0, 8.0];

impl Volume {
    /// Image volume stored as `f32`.
    pub fn from_image(image: &Tensor) -> Self {
        let s = image.shape();
        assert_eq!(s.len(), 3, "image volumes are [T, H, W]");
        Self {
            dims: [s[0], s[1], s[2]],
            voxel_size_nm: DEFAULT_VOXEL_NM,
            data: VoxelData::F32(image.data().iter().map(|&v| v as f32).collect()),
        }
    }

    pub fn from_labels(labels: &LabelVolume) -> Self {
        Self {
            dims: labels.dims(),
            voxel_size_nm: DEFAULT_VOXEL_NM,
            data: VoxelData::U32(labels.labels().to_vec()),
        }
    }

    /// Intensities as `[T, H, W]`; `u8` voxels are scaled by 1/255.
    pub fn to_image(&self) -> Tensor {
        let values: Vec<f64> = match &self.data {
            VoxelData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            VoxelData::U8(v) => v.iter().map(|&x| x as f64 / 255.0).collect(),
            VoxelData::U32(v) => v.iter().map(|&x| x as f64).collect(),
        };
        Tensor::new(&self.dims, values).expect("dims checked on load")
    }

    pub fn to_labels(&self) -> Result<LabelVolume, VolumeError> {
        let labels = match &self.data {
            VoxelData::U32(v) => v.clone(),
            VoxelData::U8(v) => v.iter().map(|&x| x as u32).collect(),
            VoxelData::F32(_) => return Err(VolumeError::Content("label volumes must have an integer dtype".into())),
        };
        LabelVolume::new(self.dims, labels).map_err(|e| VolumeError::Content(e.to_string()))
    }
}

/// Strips a `.json` or `.raw` extension so either file names the volume.
pub fn stem_of(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json" | "raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn with_suffix(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    with_suffix(&stem_of(path), "json")
}

pub fn raw_path(path: &Path) -> PathBuf {
    with_suffix(&stem_of(path), "raw")
}

pub fn save_volume(path: &Path, vol: &Volume) -> Result<(), VolumeError> {
    let n: usize = vol.dims.iter().product();
    if n != vol.data.len() {
        return Err(VolumeError::Content(format!("{:?} needs {n} voxels, got {}", vol.dims, vol.data.len())));
    }
    let sidecar = Sidecar {
        dims: vol.dims,
        dtype: serde_json::to_value(vol.data.dtype())
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .expect("dtype serializes to a string"),
        voxel_size_nm: vol.voxel_size_nm,
        byte_order: BYTE_ORDER.into(),
    };
    let bytes: Vec<u8> = match &vol.data {
        VoxelData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        VoxelData::U8(v) => v.clone(),
        VoxelData::U32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    };
    let (jp, rp) = (sidecar_path(path), raw_path(path));
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&jp, json).map_err(|source| VolumeError::Io { path: jp, source })?;
    fs::write(&rp, bytes).map_err(|source| VolumeError::Io { path: rp, source })
}

pub fn load_volume(path: &Path) -> Result<Volume, VolumeError> {
    let jp = sidecar_path(path);
    let text = fs::read_to_string(&jp).map_err(|source| VolumeError::Io { path: jp.clone(), source })?;
    let malformed = |msg: String| VolumeError::MalformedSidecar { path: jp.clone(), msg };
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    let dtype = Dtype::parse(&sidecar.dtype).ok_or_else(|| VolumeError::UnknownDtype {
        path: jp.clone(),
        dtype: sidecar.dtype.clone(),
    })?;
    if sidecar.byte_order != BYTE_ORDER {
        return Err(malformed(format!("byte_order must be {BYTE_ORDER:?}, got {:?}", sidecar.byte_order)));
    }
    if sidecar.dims.contains(&0) {
        return Err(malformed(format!("dims {:?} contain a zero extent", sidecar.dims)));
    }
    let rp = raw_path(path);
    let bytes = fs::read(&rp).map_err(|source| VolumeError::Io { path: rp.clone(), source })?;
    let n: usize = sidecar.dims.iter().product();
    let expected = n * dtype.width();
    if bytes.len() != expected {
        return Err(VolumeError::LengthMismatch {
            path: rp,
            expected,
            actual: bytes.len(),
        });
    }
    let word = |c: &[u8]| [c[0], c[1], c[2], c[3]];
    let data = match dtype {
        Dtype::F32 => VoxelData::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(word(c))).collect()),
        Dtype::U8 => VoxelData::U8(bytes),
        Dtype::U32 => VoxelData::U32(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(word(c))).collect()),
    };
    Ok(Volume {
        dims: sidecar.dims,
        voxel_size_nm: sidecar.voxel_size_nm,
        data,
    })
}
