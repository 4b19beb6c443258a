//! Real spherical harmonics up to degree 3 (the usual splatting convention)
//! and their rotation.
//!
//! Band 0 is rotation invariant and band 1 rotates as a vector. Bands 2 and 3
//! are rotated by evaluating the band on a fixed set of directions, rotating
//! the directions and refitting by least squares. The refit is exact up to
//! round-off because each band is closed under rotation.

use nalgebra::{DMatrix, Matrix3};

use super::ShCoeffs;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// The 16 basis functions evaluated at unit direction `d`.
pub fn basis(d: [f64; 3]) -> [f64; 16] {
    let [x, y, z] = d;
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        C0,
        -C1 * y,
        C1 * z,
        -C1 * x,
        C2[0] * x * y,
        C2[1] * y * z,
        C2[2] * (2.0 * zz - xx - yy),
        C2[3] * x * z,
        C2[4] * (xx - yy),
        C3[0] * y * (3.0 * xx - yy),
        C3[1] * x * y * z,
        C3[2] * y * (4.0 * zz - xx - yy),
        C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        C3[4] * x * (4.0 * zz - xx - yy),
        C3[5] * z * (xx - yy),
        C3[6] * x * (xx - 3.0 * yy),
    ]
}

/// Value of the SH expansion of channel `c` in direction `d`.
pub fn evaluate(coeffs: &ShCoeffs, c: usize, d: [f64; 3]) -> f64 {
    basis(d).iter().zip(coeffs).map(|(b, k)| b * k[c] as f64).sum()
}

pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Fibonacci lattice on the unit sphere.
fn fit_directions(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

/// Precomputed coefficient maps for one rotation `R`: new coefficients reproduce
/// the old function evaluated at `R^T d`.
#[derive(Debug, Clone)]
pub struct ShRotation {
    band1: Matrix3<f64>,
    band2: DMatrix<f64>,
    band3: DMatrix<f64>,
}

impl ShRotation {
    pub fn new(rotation: &Matrix3<f64>) -> Self {
        let dirs = fit_directions(128);
        let rt = rotation.transpose();
        let refit = |range: std::ops::Range<usize>| {
            let n = range.len();
            let mut a = DMatrix::zeros(dirs.len(), n);
            let mut b = DMatrix::zeros(dirs.len(), n);
            for (s, d) in dirs.iter().enumerate() {
                let v = nalgebra::Vector3::new(d[0], d[1], d[2]);
                let rd = rt * v;
                let ya = basis(*d);
                let yb = basis([rd.x, rd.y, rd.z]);
                for (j, k) in range.clone().enumerate() {
                    a[(s, j)] = ya[k];
                    b[(s, j)] = yb[k];
                }
            }
            let ata = a.transpose() * &a;
            let atb = a.transpose() * b;
            ata.cholesky().expect("SH fit directions are well conditioned").solve(&atb)
        };
        Self { band1: *rotation, band2: refit(4..9), band3: refit(9..16) }
    }

    pub fn apply(&self, coeffs: &ShCoeffs) -> ShCoeffs {
        let mut out = *coeffs;
        for c in 0..3 {
            // Band 1 is C1 * (v . d) with v = (-k3, -k1, k2).
            let v = nalgebra::Vector3::new(-(coeffs[3][c] as f64), -(coeffs[1][c] as f64), coeffs[2][c] as f64);
            let r = self.band1 * v;
            out[1][c] = (-r.y) as f32;
            out[2][c] = r.z as f32;
            out[3][c] = (-r.x) as f32;
            for (m, start) in [(&self.band2, 4), (&self.band3, 9)] {
                // B = A M on the fit directions, so the new coefficients are M c.
                let n = m.nrows();
                let old: Vec<f64> = (0..n).map(|j| coeffs[start + j][c] as f64).collect();
                for i in 0..n {
                    let acc: f64 = (0..n).map(|j| m[(i, j)] * old[j]).sum();
                    out[start + i][c] = acc as f32;
                }
            }
        }
        out
    }
}
