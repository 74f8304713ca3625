//! Parameter snapshot files: a small self-describing container holding a
//! store's group layout (as the JSON sidecar the engine already emits) plus
//! the raw little-endian f64 values, so a replay can rebuild the exact
//! initial parameters with no other inputs.
//!
//! Layout: `MZOP` magic, u16 version, u32 sidecar length, sidecar JSON,
//! then `dim * 8` value bytes.

use std::fs;
use std::path::Path;

use serde::Deserialize;
use zoforge::paramspace::{ParamStore, StoragePrecision};

const MAGIC: &[u8; 4] = b"MZOP";
const VERSION: u16 = 1;

#[derive(Debug)]
pub enum ParamsIoError {
    Io(std::io::Error),
    Malformed(String),
    Unsupported(String),
}

impl std::fmt::Display for ParamsIoError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Io(e) => write!(f, "{e}"),
            Self::Malformed(m) => write!(f, "malformed params file: {m}"),
            Self::Unsupported(m) => write!(f, "unsupported params file: {m}"),
        }
    }
}

impl std::error::Error for ParamsIoError {}

impl From<std::io::Error> for ParamsIoError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

#[derive(Deserialize)]
struct Sidecar {
    storage: String,
    dim: usize,
    layout_hash: String,
    groups: Vec<Group>,
    adapters: Vec<serde_json::Value>,
}

#[derive(Deserialize)]
struct Group {
    name: String,
    offset: usize,
    len: usize,
    trainable: bool,
    shape: Option<(usize, usize)>,
}

pub fn write_params(store: &ParamStore, path: &Path) -> Result<(), ParamsIoError> {
    let (values, sidecar) = store.export_raw();
    let mut out = Vec::with_capacity(4 + 2 + 4 + sidecar.len() + values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(sidecar.len() as u32).to_le_bytes());
    out.extend_from_slice(sidecar.as_bytes());
    out.extend_from_slice(&values);
    fs::write(path, out)?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<ParamStore, ParamsIoError> {
    let data = fs::read(path)?;
    if data.len() < 10 || &data[..4] != MAGIC {
        return Err(ParamsIoError::Malformed("missing MZOP magic".into()));
    }
    let version = u16::from_le_bytes([data[4], data[5]]);
    if version != VERSION {
        return Err(ParamsIoError::Unsupported(format!("version {version}")));
    }
    let side_len = u32::from_le_bytes([data[6], data[7], data[8], data[9]]) as usize;
    let body = &data[10..];
    if body.len() < side_len {
        return Err(ParamsIoError::Malformed("truncated sidecar".into()));
    }
    let sidecar: Sidecar = serde_json::from_slice(&body[..side_len])
        .map_err(|e| ParamsIoError::Malformed(format!("sidecar: {e}")))?;
    if !sidecar.adapters.is_empty() {
        return Err(ParamsIoError::Unsupported(
            "adapter-bearing stores cannot be rebuilt from a v1 params file".into(),
        ));
    }
    let values = &body[side_len..];
    if values.len() != sidecar.dim * 8 {
        return Err(ParamsIoError::Malformed(format!(
            "expected {} value bytes, found {}",
            sidecar.dim * 8,
            values.len()
        )));
    }

    let precision = match sidecar.storage.as_str() {
        "f64" => StoragePrecision::F64,
        "f32" => StoragePrecision::F32,
        other => return Err(ParamsIoError::Unsupported(format!("storage `{other}`"))),
    };
    let mut store = ParamStore::new(precision);
    let mut expected_offset = 0usize;
    for g in &sidecar.groups {
        if g.offset != expected_offset {
            return Err(ParamsIoError::Malformed(format!(
                "group `{}` offset {} is not contiguous (expected {expected_offset})",
                g.name, g.offset
            )));
        }
        let mut vals = Vec::with_capacity(g.len);
        for i in g.offset..g.offset + g.len {
            let start = i * 8;
            let end = start + 8;
            if end > values.len() {
                return Err(ParamsIoError::Malformed("value range out of bounds".into()));
            }
            let mut buf = [0u8; 8];
            buf.copy_from_slice(&values[start..end]);
            vals.push(f64::from_le_bytes(buf));
        }
        let added = match g.shape {
            Some((rows, cols)) => {
                if rows * cols != g.len {
                    return Err(ParamsIoError::Malformed(format!(
                        "group `{}` shape {rows}x{cols} does not cover {} values",
                        g.name, g.len
                    )));
                }
                store.add_matrix(&g.name, rows, cols, &vals, g.trainable)
            }
            None => store.add_vector(&g.name, &vals, g.trainable),
        };
        added.map_err(|e| ParamsIoError::Malformed(e.to_string()))?;
        expected_offset += g.len;
    }

    let rebuilt_hash = format!("{:016x}", store.layout_hash());
    if rebuilt_hash != sidecar.layout_hash {
        return Err(ParamsIoError::Malformed(format!(
            "rebuilt layout hash {rebuilt_hash} does not match recorded {}",
            sidecar.layout_hash
        )));
    }
    Ok(store)
}
