//! Per-point raw feature sidecar: `b"SGPF"`, `u32` rows, `u32` dim, then
//! `rows * dim` little-endian `f32` values in row-major order, keyed to splat order.

use crate::{Error, Result};

pub const SIDECAR_MAGIC: &[u8; 4] = b"SGPF";

/// Dense row-major `rows x dim` matrix of 32-bit features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize) -> Self {
        Self { rows, dim, data: vec![0.0; rows * dim] }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        Ok(Self { rows: rows.len(), dim, data: rows.concat() })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: indices.len(), dim: self.dim, data }
    }
}

pub fn parse_feature_sidecar(bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.len() < 12 || &bytes[..4] != SIDECAR_MAGIC {
        return Err(Error::Format("missing feature sidecar magic".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + rows * dim * 4;
    if bytes.len() != expected {
        return Err(Error::Length { expected, found: bytes.len() });
    }
    let data: Vec<f32> = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format(format!("non-finite feature in row {}", i / dim.max(1))));
    }
    Ok(FeatureMatrix { rows, dim, data })
}

pub fn serialize_feature_sidecar(features: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + features.data.len() * 4);
    out.extend_from_slice(SIDECAR_MAGIC);
    out.extend_from_slice(&(features.rows as u32).to_le_bytes());
    out.extend_from_slice(&(features.dim as u32).to_le_bytes());
    for v in &features.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let f = FeatureMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-4.0, 5.5, 0.0]]).unwrap();
        let bytes = serialize_feature_sidecar(&f);
        assert_eq!(bytes.len(), 12 + 24);
        assert_eq!(parse_feature_sidecar(&bytes).unwrap(), f);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let f = FeatureMatrix::new(2, 2);
        let mut bytes = serialize_feature_sidecar(&f);
        bytes.pop();
        assert!(matches!(parse_feature_sidecar(&bytes), Err(Error::Length { .. })));
        bytes[0] = b'X';
        assert!(parse_feature_sidecar(&bytes).is_err());
    }
}
