//! CFV1: `"CFV1"`, `u32` rows, `u32` dim, then `rows * dim` `f32` values,
//! all little-endian, row-major.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CFV1";
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if rows * dim != values.len() {
            return Err(Error::shape(format!(
                "{rows}x{dim} matrix needs {} values, got {}",
                rows * dim,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature value {i}")));
        }
        Ok(Self { rows, dim, values })
    }

    /// Rounds to `f32` storage.
    pub fn from_array(a: &Array2<f64>) -> Result<Self> {
        let (rows, dim) = a.dim();
        Self::new(rows, dim, a.iter().map(|&v| v as f32).collect())
    }

    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.rows, self.dim), |(r, c)| self.values[r * self.dim + c] as f64)
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.values[r * self.dim..(r + 1) * self.dim]
    }
}

pub fn encode_feature_matrix(m: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.rows as u32).to_le_bytes());
    out.extend_from_slice(&(m.dim as u32).to_le_bytes());
    for v in &m.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes one matrix from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode_feature_matrix(bytes: &[u8]) -> Result<(FeatureMatrix, usize)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic { expected: "CFV1" });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated("CFV1 header".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = rows
        .checked_mul(dim)
        .ok_or_else(|| Error::shape(format!("{rows}x{dim} overflows")))?;
    let end = HEADER_LEN + 4 * count;
    if bytes.len() < end {
        return Err(Error::Truncated(format!(
            "CFV1 payload: need {} bytes for {rows}x{dim}, have {}",
            4 * count,
            bytes.len() - HEADER_LEN
        )));
    }
    let values = bytes[HEADER_LEN..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((FeatureMatrix::new(rows, dim, values)?, end))
}

pub fn load_feature_file(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (m, used) = decode_feature_matrix(&bytes)?;
    if used != bytes.len() {
        return Err(Error::shape(format!(
            "{}: {} trailing bytes after CFV1 payload",
            path.display(),
            bytes.len() - used
        )));
    }
    Ok(m)
}

pub fn write_feature_file(m: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_feature_matrix(m)).map_err(|e| Error::io(path, e))
}
