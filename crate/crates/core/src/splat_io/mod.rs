//! Gaussian splat clouds: storage, binary point-file I/O, feature sidecars,
//! scale clipping and similarity transforms (with spherical-harmonics rotation).

mod ply;
pub mod sh;
mod sidecar;
mod transform;

use std::sync::Arc;

pub use ply::{parse_splat_file, serialize_splat_file};
pub use sidecar::{parse_feature_sidecar, serialize_feature_sidecar, FeatureMatrix};
pub use transform::{transform_cloud, SimilarityTransform};

use crate::{Error, Feature, Result};

/// Number of SH coefficients per channel at degree 3.
pub const SH_COEFFS: usize = 16;

/// Per-Gaussian spherical-harmonics coefficients, `[coefficient][channel]`, DC first.
pub type ShCoeffs = [[f32; 3]; SH_COEFFS];

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Array-of-Gaussians payload.
#[derive(Debug, Clone, Default)]
pub struct SplatCloud {
    pub positions: Vec<[f32; 3]>,
    pub log_scales: Vec<[f32; 3]>,
    /// Unit quaternions `(w, x, y, z)`.
    pub rotations: Vec<[f32; 4]>,
    pub opacity_logits: Vec<f32>,
    pub sh: Vec<ShCoeffs>,
    /// Highest SH band present in the source file (coefficients above are zero).
    pub sh_degree: u8,
    pub reduced_features: Option<Vec<Feature>>,
    pub raw_features: Option<FeatureMatrix>,
    /// Source-file layout, kept so that unrecognized fields round-trip.
    pub(crate) source: Option<SourceRecords>,
}

/// Bytes of a parsed file that the cloud fields do not cover.
#[derive(Debug, Clone)]
pub(crate) struct SourceRecords {
    pub layout: Arc<ply::PlyLayout>,
    /// Unrecognized property bytes, `layout.extra_stride` per point.
    pub extras: Vec<u8>,
    /// Quaternions exactly as stored in the file, before renormalization.
    pub raw_rotations: Vec<[f32; 4]>,
}

impl PartialEq for SplatCloud {
    fn eq(&self, other: &Self) -> bool {
        let bits3 = |a: &[[f32; 3]], b: &[[f32; 3]]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.iter().zip(y).all(|(u, v)| u.to_bits() == v.to_bits()))
        };
        self.positions.len() == other.positions.len()
            && bits3(&self.positions, &other.positions)
            && bits3(&self.log_scales, &other.log_scales)
            && self.rotations == other.rotations
            && self.opacity_logits == other.opacity_logits
            && self.sh == other.sh
            && self.reduced_features == other.reduced_features
            && self.raw_features == other.raw_features
    }
}

impl SplatCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Activated opacity `η = logistic(logit)`.
    pub fn opacity(&self, i: usize) -> f64 {
        logistic(self.opacity_logits[i] as f64)
    }

    /// Checks field lengths, finiteness and quaternion norms.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.log_scales.len() != n
            || self.rotations.len() != n
            || self.opacity_logits.len() != n
            || self.sh.len() != n
        {
            return Err(Error::Validation("field lengths disagree".into()));
        }
        if let Some(f) = &self.reduced_features {
            if f.len() != n {
                return Err(Error::Validation("reduced feature count != point count".into()));
            }
        }
        if let Some(f) = &self.raw_features {
            if f.rows != n {
                return Err(Error::Validation("raw feature count != point count".into()));
            }
        }
        for i in 0..n {
            let finite = self.positions[i].iter().all(|v| v.is_finite())
                && self.log_scales[i].iter().all(|v| v.is_finite())
                && self.rotations[i].iter().all(|v| v.is_finite())
                && self.opacity_logits[i].is_finite()
                && self.sh[i].iter().flatten().all(|v| v.is_finite());
            if !finite {
                return Err(Error::Validation(format!("non-finite value in point {i}")));
            }
            let q = self.rotations[i];
            let norm = q.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::Validation(format!("quaternion {i} has norm {norm}")));
            }
        }
        Ok(())
    }

    /// Sub-cloud in the order given by `indices`; indices may repeat.
    pub fn select(&self, indices: &[usize]) -> SplatCloud {
        let pick = |v: &[[f32; 3]]| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        SplatCloud {
            positions: pick(&self.positions),
            log_scales: pick(&self.log_scales),
            rotations: indices.iter().map(|&i| self.rotations[i]).collect(),
            opacity_logits: indices.iter().map(|&i| self.opacity_logits[i]).collect(),
            sh: indices.iter().map(|&i| self.sh[i]).collect(),
            sh_degree: self.sh_degree,
            reduced_features: self.reduced_features.as_ref().map(|f| indices.iter().map(|&i| f[i]).collect()),
            raw_features: self.raw_features.as_ref().map(|f| f.select(indices)),
            source: self.source.as_ref().map(|s| {
                let stride = s.layout.extra_stride;
                let mut extras = Vec::with_capacity(indices.len() * stride);
                for &i in indices {
                    extras.extend_from_slice(&s.extras[i * stride..(i + 1) * stride]);
                }
                SourceRecords {
                    layout: s.layout.clone(),
                    extras,
                    raw_rotations: indices.iter().map(|&i| s.raw_rotations[i]).collect(),
                }
            }),
        }
    }

    /// Concatenation. Source layouts survive only when every part shares one.
    pub fn concat(parts: &[&SplatCloud]) -> SplatCloud {
        let mut out = SplatCloud::default();
        let Some(first) = parts.first() else {
            out.sh_degree = 3;
            return out;
        };
        out.sh_degree = parts.iter().map(|p| p.sh_degree).max().unwrap_or(3);
        let all_reduced = parts.iter().all(|p| p.reduced_features.is_some());
        let all_raw = parts.iter().all(|p| p.raw_features.is_some())
            && parts
                .iter()
                .all(|p| p.raw_features.as_ref().map(|f| f.dim) == first.raw_features.as_ref().map(|f| f.dim));
        let shared_layout = match &first.source {
            Some(s) => parts
                .iter()
                .all(|p| p.source.as_ref().is_some_and(|o| Arc::ptr_eq(&o.layout, &s.layout) || o.layout == s.layout)),
            None => false,
        };
        let mut reduced = Vec::new();
        let mut raw = first.raw_features.as_ref().map(|f| FeatureMatrix::new(0, f.dim));
        let mut source = if shared_layout {
            first.source.as_ref().map(|s| SourceRecords {
                layout: s.layout.clone(),
                extras: Vec::new(),
                raw_rotations: Vec::new(),
            })
        } else {
            None
        };
        for p in parts {
            out.positions.extend_from_slice(&p.positions);
            out.log_scales.extend_from_slice(&p.log_scales);
            out.rotations.extend_from_slice(&p.rotations);
            out.opacity_logits.extend_from_slice(&p.opacity_logits);
            out.sh.extend_from_slice(&p.sh);
            if all_reduced {
                reduced.extend_from_slice(p.reduced_features.as_ref().unwrap());
            }
            if all_raw {
                let r = raw.as_mut().unwrap();
                let f = p.raw_features.as_ref().unwrap();
                r.data.extend_from_slice(&f.data);
                r.rows += f.rows;
            }
            if let (Some(dst), Some(src)) = (source.as_mut(), p.source.as_ref()) {
                dst.extras.extend_from_slice(&src.extras);
                dst.raw_rotations.extend_from_slice(&src.raw_rotations);
            }
        }
        out.reduced_features = all_reduced.then_some(reduced);
        out.raw_features = if all_raw { raw } else { None };
        out.source = source;
        out
    }

    /// Axis-aligned bounds of the Gaussian centers, or `None` when empty.
    pub fn center_bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        if self.is_empty() {
            return None;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a] as f64);
                hi[a] = hi[a].max(p[a] as f64);
            }
        }
        Some((lo, hi))
    }

    /// Flattened SH coefficients (48 values, coefficient-major) of point `i`.
    pub fn sh_flat(&self, i: usize) -> [f32; 48] {
        let mut out = [0.0; 48];
        for (k, c) in self.sh[i].iter().enumerate() {
            out[3 * k..3 * k + 3].copy_from_slice(c);
        }
        out
    }
}

/// Clips every Gaussian extent to at most twice `voxel_size`.
pub fn clip_scales(cloud: &SplatCloud, voxel_size: f64) -> Result<SplatCloud> {
    if !(voxel_size > 0.0) {
        return Err(Error::Parameter(format!("voxel size must be positive, got {voxel_size}")));
    }
    let limit = (2.0 * voxel_size).ln() as f32;
    let mut out = cloud.clone();
    for s in &mut out.log_scales {
        for v in s.iter_mut() {
            if *v > limit {
                *v = limit;
            }
        }
    }
    Ok(out)
}
