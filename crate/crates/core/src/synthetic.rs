//! Procedural test exemplars: a bumpy torus as a splat cloud with raw features.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::feature_field::{FeatureConfig, FeatureReducer};
use crate::gca_train::ExemplarVoxels;
use crate::splat_io::{FeatureMatrix, SplatCloud};
use crate::voxelizer::{assign_representative_features, build_surface_voxels, Bounds, VoxelizerConfig};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorusSpec {
    pub center: [f64; 3],
    pub major: f64,
    pub minor: f64,
    /// Amplitude of the tube-radius modulation.
    pub bump: f64,
    /// Bumps around the ring and around the tube.
    pub bump_freq: (u32, u32),
    pub points: usize,
    /// Fraction of points emitted as low-opacity floaters.
    pub floater_fraction: f64,
    pub raw_dim: usize,
}

impl Default for TorusSpec {
    fn default() -> Self {
        Self {
            center: [0.5, 0.5, 0.5],
            major: 0.3,
            minor: 0.1,
            bump: 0.025,
            bump_freq: (6, 3),
            points: 24_000,
            floater_fraction: 0.05,
            raw_dim: 16,
        }
    }
}

fn surface_point(s: &TorusSpec, u: f64, v: f64) -> ([f64; 3], [f64; 3]) {
    let (fu, fv) = s.bump_freq;
    let r = s.minor + s.bump * (fu as f64 * u).sin() * (fv as f64 * v).cos();
    let n = [u.cos() * v.cos(), u.sin() * v.cos(), v.sin()];
    let ring = [u.cos() * s.major, u.sin() * s.major, 0.0];
    let p = [s.center[0] + ring[0] + r * n[0], s.center[1] + ring[1] + r * n[1], s.center[2] + ring[2] + r * n[2]];
    (p, n)
}

/// Bumpy torus around the z axis. Colour varies with the ring angle; the raw
/// semantic features separate the outer and inner halves of the tube.
pub fn torus_cloud(spec: &TorusSpec, seed: u64) -> SplatCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.points;
    let mut cloud = SplatCloud {
        positions: Vec::with_capacity(n),
        log_scales: Vec::with_capacity(n),
        rotations: Vec::with_capacity(n),
        opacity_logits: Vec::with_capacity(n),
        sh: Vec::with_capacity(n),
        sh_degree: 1,
        reduced_features: None,
        raw_features: None,
        source: None,
    };
    let mut raw = FeatureMatrix::new(n, spec.raw_dim);
    for i in 0..n {
        let u = rng.random::<f64>() * TAU;
        let v = rng.random::<f64>() * TAU;
        let (p, normal) = surface_point(spec, u, v);
        let floater = rng.random::<f64>() < spec.floater_fraction;
        let jitter = if floater { 0.04 } else { 0.0 };
        let p = p.map(|c| c + jitter * (rng.random::<f64>() - 0.5));
        cloud.positions.push(p.map(|c| c as f32));
        cloud.log_scales.push([(0.006f32).ln(); 3]);
        cloud.rotations.push([1.0, 0.0, 0.0, 0.0]);
        cloud.opacity_logits.push(if floater { -4.0 } else { 2.0 + rng.random::<f32>() });
        let mut sh = [[0.0f32; 3]; 16];
        let hue = [u.cos(), (u + TAU / 3.0).cos(), (u + 2.0 * TAU / 3.0).cos()];
        for c in 0..3 {
            sh[0][c] = (0.8 * hue[c]) as f32;
            for k in 0..3 {
                sh[1 + k][c] = (0.15 * normal[k] * (1.0 + hue[c])) as f32;
            }
        }
        cloud.sh.push(sh);
        let outer = v.cos();
        let row = &mut raw.data[i * spec.raw_dim..(i + 1) * spec.raw_dim];
        for (j, x) in row.iter_mut().enumerate() {
            let phase = j as f64 * 0.7;
            *x = ((outer * 1.5 + phase).sin() + 0.3 * (v.sin() * 2.0 + phase).cos()) as f32;
        }
    }
    cloud.raw_features = Some(raw);
    cloud
}

/// Runs the reduction and voxelization pipeline on [`torus_cloud`] and returns
/// the cloud (with reduced features) and its exemplar voxels.
pub fn torus_exemplar(spec: &TorusSpec, seed: u64, target: u32, coarse: u32) -> Result<(SplatCloud, ExemplarVoxels)> {
    let mut cloud = torus_cloud(spec, seed);
    let reducer = FeatureReducer::fit(&cloud, FeatureConfig::default())?;
    cloud.reduced_features = Some(reducer.reduce(&cloud)?);
    let (grid, _) = build_surface_voxels(&cloud, Bounds::unit(), target, &VoxelizerConfig::default())?;
    let grid = assign_representative_features(&grid, &cloud)?;
    Ok((cloud, ExemplarVoxels::new(grid, coarse)?))
}
