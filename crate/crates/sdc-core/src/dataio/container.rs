//! Binary matrix container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SDCM"
//! 4       2     u16 format version (currently 1)
//! 6       1     u8 dtype code (0 = float32)
//! 7       1     u8 element order (0 = row-major)
//! 8       8     u64 rows
//! 16      8     u64 cols
//! 24      ...   rows*cols float32 payload, row-major, little-endian
//! ```
//!
//! An optional JSON sidecar at `<file>.meta.json` carries identifiers that do
//! not belong in a numeric payload: stimulus ids, voxel ids, participant id
//! and an embedding-space tag.

use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const MAGIC: [u8; 4] = *b"SDCM";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;
pub const ORDER_ROW_MAJOR: u8 = 0;
const HEADER_LEN: usize = 24;

/// Sidecar metadata. All fields optional; absent fields are omitted from the
/// JSON so the files stay byte-stable.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixMeta {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub space_tag: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub participant_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stimulus_ids: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub voxel_ids: Option<Vec<usize>>,
}

impl MatrixMeta {
    pub fn is_empty(&self) -> bool {
        self.space_tag.is_none()
            && self.participant_id.is_none()
            && self.stimulus_ids.is_none()
            && self.voxel_ids.is_none()
    }
}

/// A loaded container: float payload (widened to f64 for computation) plus
/// sidecar metadata when present.
#[derive(Debug, Clone)]
pub struct MatrixFile {
    pub values: Array2<f64>,
    pub meta: Option<MatrixMeta>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    path.with_file_name(name)
}

/// Store a matrix (and sidecar, when `meta` is non-empty) at `path`.
///
/// Values are written as float32; callers own any precision implications.
/// Non-finite values are rejected rather than written.
pub fn store_matrix(path: &Path, values: &Array2<f64>, meta: Option<&MatrixMeta>) -> Result<()> {
    for (idx, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Data(format!(
                "refusing to store non-finite value at flat index {idx} of {}",
                path.display()
            )));
        }
    }
    let rows = values.nrows() as u64;
    let cols = values.ncols() as u64;
    let mut buf = Vec::with_capacity(HEADER_LEN + values.len() * 4);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(DTYPE_F32);
    buf.push(ORDER_ROW_MAJOR);
    buf.extend_from_slice(&rows.to_le_bytes());
    buf.extend_from_slice(&cols.to_le_bytes());
    for v in values.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    if let Some(m) = meta {
        if !m.is_empty() {
            let json = serde_json::to_string_pretty(m)?;
            std::fs::write(sidecar_path(path), json + "\n")?;
        }
    }
    Ok(())
}

/// Load a matrix container, validating magic, version, dtype, order and the
/// exact payload length; reads the `.meta.json` sidecar when present.
pub fn load_matrix(path: &Path) -> Result<MatrixFile> {
    let mut f = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::Corrupt(format!(
            "{}: {} bytes is shorter than the {HEADER_LEN}-byte header",
            path.display(),
            bytes.len()
        )));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported format version {version}",
            path.display()
        )));
    }
    let dtype = bytes[6];
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("{}: unknown dtype code {dtype}", path.display())));
    }
    let order = bytes[7];
    if order != ORDER_ROW_MAJOR {
        return Err(Error::Format(format!("{}: unknown order code {order}", path.display())));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let count = rows
        .checked_mul(cols)
        .and_then(|c| usize::try_from(c).ok())
        .ok_or_else(|| Error::Corrupt(format!("{}: implausible shape {rows}x{cols}", path.display())))?;
    let expect = HEADER_LEN + count * 4;
    if bytes.len() != expect {
        return Err(Error::Corrupt(format!(
            "{}: header promises {rows}x{cols} ({expect} bytes) but file has {}",
            path.display(),
            bytes.len()
        )));
    }
    let mut values = Array2::<f64>::zeros((rows as usize, cols as usize));
    for (i, v) in values.iter_mut().enumerate() {
        let off = HEADER_LEN + i * 4;
        let x = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if !x.is_finite() {
            return Err(Error::Data(format!(
                "{}: non-finite value at flat index {i}",
                path.display()
            )));
        }
        *v = f64::from(x);
    }
    let sc = sidecar_path(path);
    let meta = if sc.exists() {
        let text = std::fs::read_to_string(&sc)?;
        Some(serde_json::from_str::<MatrixMeta>(&text)?)
    } else {
        None
    };
    Ok(MatrixFile { values, meta })
}
