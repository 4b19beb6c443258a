use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::sh::{quat_to_matrix, ShRotation};
use super::SplatCloud;
use crate::{Error, Result};

/// Rigid motion with uniform scale: `p -> scale * R p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
    pub scale: f64,
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::identity()
    }
}

fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

fn quat_normalize(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self { rotation: [1.0, 0.0, 0.0, 0.0], translation: [0.0; 3], scale: 1.0 }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self { translation: t, ..Self::identity() }
    }

    /// Rotation by `angle` radians about `axis`.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Self {
        let q = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(Vector3::from(axis)), angle);
        Self { rotation: [q.w, q.i, q.j, q.k], ..Self::identity() }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_translation(mut self, t: [f64; 3]) -> Self {
        self.translation = t;
        self
    }

    /// Decomposes a 3x4 affine matrix `[A | t]`; fails unless `A` is a positive
    /// multiple of a rotation.
    pub fn from_affine(m: [[f64; 4]; 3]) -> Result<Self> {
        let a = Matrix3::from_fn(|r, c| m[r][c]);
        let det = a.determinant();
        if !(det > 0.0) {
            return Err(Error::UnsupportedTransform("linear part must have positive determinant".into()));
        }
        let scale = det.cbrt();
        let r = a / scale;
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-9 {
            return Err(Error::UnsupportedTransform(format!(
                "non-uniform scale or shear (orthogonality error {err:.3e})"
            )));
        }
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
        Ok(Self { rotation: [q.w, q.i, q.j, q.k], translation: [m[0][3], m[1][3], m[2][3]], scale })
    }

    pub fn is_identity(&self) -> bool {
        self.scale == 1.0 && self.translation == [0.0; 3] && self.has_identity_rotation()
    }

    fn has_identity_rotation(&self) -> bool {
        self.rotation == [1.0, 0.0, 0.0, 0.0] || self.rotation == [-1.0, 0.0, 0.0, 0.0]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(quat_normalize(self.rotation))
    }

    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotation_matrix() * Vector3::from(p) * self.scale;
        [r.x + self.translation[0], r.y + self.translation[1], r.z + self.translation[2]]
    }

    /// `self.then(other)` applies `self` first.
    pub fn then(&self, other: &SimilarityTransform) -> SimilarityTransform {
        let t = other.apply_point(self.translation);
        SimilarityTransform {
            rotation: quat_normalize(quat_mul(other.rotation, self.rotation)),
            translation: t,
            scale: self.scale * other.scale,
        }
    }
}

/// Applies a similarity transform to positions, rotations, scales and SH.
pub fn transform_cloud(cloud: &SplatCloud, transform: &SimilarityTransform) -> Result<SplatCloud> {
    if !(transform.scale > 0.0) || !transform.scale.is_finite() {
        return Err(Error::UnsupportedTransform(format!("scale must be positive, got {}", transform.scale)));
    }
    if transform.is_identity() {
        return Ok(cloud.clone());
    }
    let mut out = cloud.clone();
    let rotate = !transform.has_identity_rotation();
    let m = transform.rotation_matrix() * transform.scale;
    let t = Vector3::from(transform.translation);
    for p in &mut out.positions {
        let v = m * Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64) + t;
        *p = [v.x as f32, v.y as f32, v.z as f32];
    }
    if transform.scale != 1.0 {
        let ds = transform.scale.ln();
        for s in &mut out.log_scales {
            *s = s.map(|v| (v as f64 + ds) as f32);
        }
    }
    if rotate {
        let qr = quat_normalize(transform.rotation);
        for q in &mut out.rotations {
            let composed = quat_normalize(quat_mul(qr, q.map(|v| v as f64)));
            *q = composed.map(|v| v as f32);
        }
        let shr = ShRotation::new(&transform.rotation_matrix());
        for sh in &mut out.sh {
            *sh = shr.apply(sh);
        }
    }
    Ok(out)
}
