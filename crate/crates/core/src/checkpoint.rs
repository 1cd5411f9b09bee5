//! Binary container for parameter-shaped data (weights, importance maps).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "WVAC"
//! version  u32      1
//! kind     u32      0 = parameters, 1 = importance map
//! layers   u32      number of layers L
//! shapes   L × (rows u32, cols u32)   weight matrix out × in; biases have `rows` entries
//! payload  for each layer: rows·cols weights (f64, row-major), then rows biases (f64)
//! ```
//!
//! Files end exactly after the payload; trailing bytes are rejected.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Layer, MlpParams};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"WVAC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum ContainerKind {
    Parameters = 0,
    Importance = 1,
}

pub fn encode(params: &MlpParams, kind: ContainerKind) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * params.layers.len() + 8 * params.num_params());
    out.extend_from_slice(MAGIC);
    for v in [VERSION, kind as u32, params.layers.len() as u32] {
        out.extend(v.to_le_bytes());
    }
    for (rows, cols) in params.shapes() {
        out.extend((rows as u32).to_le_bytes());
        out.extend((cols as u32).to_le_bytes());
    }
    for v in params.values() {
        out.extend(v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: need {n} bytes at offset {}", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode(bytes: &[u8], expected: ContainerKind) -> Result<MlpParams> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let kind = r.u32()?;
    if kind != expected as u32 {
        return Err(Error::Checkpoint(format!(
            "container kind {kind}, expected {}",
            expected as u32
        )));
    }
    let n_layers = r.u32()? as usize;
    if n_layers == 0 {
        return Err(Error::Checkpoint("no layers".into()));
    }
    let mut shapes = Vec::with_capacity(n_layers.min(64));
    for _ in 0..n_layers {
        shapes.push((r.u32()? as usize, r.u32()? as usize));
    }
    let mut layers = Vec::with_capacity(n_layers.min(64));
    for (rows, cols) in shapes {
        let weights = Matrix::from_vec(rows, cols, r.f64s(rows * cols)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let biases = r.f64s(rows)?;
        if biases.iter().any(|b| !b.is_finite()) {
            return Err(Error::Checkpoint("non-finite bias".into()));
        }
        layers.push(Layer { weights, biases });
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    for pair in layers.windows(2) {
        if pair[1].weights.cols() != pair[0].weights.rows() {
            return Err(Error::Checkpoint("layer widths do not chain".into()));
        }
    }
    Ok(MlpParams { layers })
}

pub fn save(path: &Path, params: &MlpParams, kind: ContainerKind) -> Result<()> {
    fs::write(path, encode(params, kind)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, kind: ContainerKind) -> Result<MlpParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, kind)
}
