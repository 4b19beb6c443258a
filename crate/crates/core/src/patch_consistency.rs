//! Sparse patch consistency: exhaustive patch matching against the exemplar,
//! occupancy voting with clamped expansion, and nearest-neighbour remapping
//! of generated voxels onto exemplar cells.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::coord::{dilate, in_bounds, Coord};
use crate::feature_field::normalize_halves;
use crate::splat_io::SplatCloud;
use crate::voxelizer::{CellData, VoxelGrid};
use crate::{Error, Feature, Result, FEATURE_DIM, HALF_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyConfig {
    pub l: usize,
    pub iterations: usize,
    pub w: f64,
    pub beta: f64,
    pub lambda_patch: i32,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self { l: 5, iterations: 7, w: 0.5, beta: 0.5, lambda_patch: 2 }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l % 2 == 0 || self.l == 0 {
            return Err(Error::Parameter(format!("patch size must be odd, got {}", self.l)));
        }
        if !(0.0..=1.0).contains(&self.w) {
            return Err(Error::Parameter(format!("w must be in [0,1], got {}", self.w)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Parameter(format!("beta must be in (0,1], got {}", self.beta)));
        }
        if self.lambda_patch < 0 {
            return Err(Error::Parameter("lambda_patch must be non-negative".into()));
        }
        Ok(())
    }
}

/// `l³` window around a voxel; offsets are indexed `(x·l + y)·l + z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub center: Coord,
    pub l: usize,
    occupancy: Vec<u64>,
    /// Occupied offsets in increasing order.
    occupied: Vec<u32>,
    /// `l³` rows, zero where unoccupied.
    pub features: Vec<Feature>,
}

impl Patch {
    pub fn volume(&self) -> usize {
        self.l * self.l * self.l
    }

    pub fn is_occupied(&self, i: usize) -> bool {
        self.occupancy[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.len()
    }

    /// Grid coordinate of offset `i`.
    pub fn cell(&self, i: usize) -> Coord {
        let l = self.l as i32;
        let h = l / 2;
        let i = i as i32;
        [self.center[0] + i / (l * l) - h, self.center[1] + (i / l) % l - h, self.center[2] + i % l - h]
    }

    fn overlap(&self, other: &Patch) -> u32 {
        self.occupancy.iter().zip(&other.occupancy).map(|(a, b)| (a & b).count_ones()).sum()
    }
}

fn patch_at(grid: &VoxelGrid, center: Coord, l: usize) -> Patch {
    let p = l * l * l;
    let h = (l / 2) as i32;
    let mut occupancy = vec![0u64; p.div_ceil(64)];
    let mut occupied = Vec::new();
    let mut features = vec![[0.0f32; FEATURE_DIM]; p];
    let mut i = 0usize;
    for dx in -h..=h {
        for dy in -h..=h {
            for dz in -h..=h {
                let c = [center[0] + dx, center[1] + dy, center[2] + dz];
                if let Some(d) = grid.cells.get(&c) {
                    occupancy[i / 64] |= 1 << (i % 64);
                    occupied.push(i as u32);
                    features[i] = d.feature.unwrap_or([0.0; FEATURE_DIM]);
                }
                i += 1;
            }
        }
    }
    Patch { center, l, occupancy, occupied, features }
}

/// One patch per occupied voxel, in coordinate order.
pub fn extract_patches(grid: &VoxelGrid, l: usize) -> Vec<Patch> {
    grid.cells.keys().map(|c| patch_at(grid, *c, l)).collect()
}

/// Occupancy and feature terms of a patch comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchDistance {
    pub occupancy: f64,
    pub feature: f64,
    pub total: f64,
}

fn combine(overlap: u32, dots: [f64; 2], p: usize, w: f64) -> PatchDistance {
    let occupancy = 1.0 - overlap as f64 / p as f64;
    let feature = if overlap == 0 {
        2.0
    } else {
        let o = overlap as f64;
        0.5 * ((1.0 - dots[0] / o) + (1.0 - dots[1] / o))
    };
    PatchDistance { occupancy, feature, total: (1.0 - w) * occupancy + w * feature }
}

fn half_dots(a: &Feature, b: &Feature, acc: &mut [f64; 2]) {
    for h in 0..2 {
        for k in h * HALF_DIM..(h + 1) * HALF_DIM {
            acc[h] += a[k] as f64 * b[k] as f64;
        }
    }
}

/// Straightforward evaluation over every offset.
pub fn patch_distance(exemplar: &Patch, generated: &Patch, w: f64) -> PatchDistance {
    assert_eq!(exemplar.l, generated.l, "patch sizes differ");
    let p = exemplar.volume();
    let mut overlap = 0u32;
    let mut dots = [0.0f64; 2];
    for i in 0..p {
        let (a, b) = (exemplar.is_occupied(i), generated.is_occupied(i));
        if a && b {
            overlap += 1;
        }
        half_dots(&exemplar.features[i], &generated.features[i], &mut dots);
    }
    combine(overlap, dots, p, w)
}

/// Same value as [`patch_distance`]; visits only the generated patch's occupied
/// offsets, whose skipped terms are exact zeros.
fn patch_distance_sparse(exemplar: &Patch, generated: &Patch, w: f64) -> f64 {
    let overlap = exemplar.overlap(generated);
    let mut dots = [0.0f64; 2];
    if overlap > 0 {
        for &i in &generated.occupied {
            let i = i as usize;
            if exemplar.is_occupied(i) {
                half_dots(&exemplar.features[i], &generated.features[i], &mut dots);
            }
        }
    }
    combine(overlap, dots, exemplar.volume(), w).total
}

fn best_match(generated: &Patch, exemplar: &[Patch], w: f64) -> usize {
    let mut best = (0usize, f64::INFINITY);
    for (j, e) in exemplar.iter().enumerate() {
        let d = patch_distance_sparse(e, generated, w);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

/// Index of the closest exemplar patch for every generated patch; ties go to
/// the lowest index.
pub fn match_exhaustive(generated: &[Patch], exemplar: &[Patch], w: f64) -> Result<Vec<usize>> {
    if exemplar.is_empty() {
        return Err(Error::Parameter("no exemplar patches to match against".into()));
    }
    if let (Some(g), Some(e)) = (generated.first(), exemplar.first()) {
        if g.l != e.l {
            return Err(Error::Shape("patch sizes differ".into()));
        }
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        Ok(generated.par_iter().map(|g| best_match(g, exemplar, w)).collect())
    }
    #[cfg(not(feature = "parallel"))]
    {
        Ok(generated.iter().map(|g| best_match(g, exemplar, w)).collect())
    }
}

/// Double-loop reference matcher built on [`patch_distance`].
pub fn match_naive(generated: &[Patch], exemplar: &[Patch], w: f64) -> Vec<usize> {
    let mut out = Vec::with_capacity(generated.len());
    for g in generated {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (j, e) in exemplar.iter().enumerate() {
            let d = patch_distance(e, g, w).total;
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        out.push(best);
    }
    out
}

fn normalized(f: &[f64; FEATURE_DIM]) -> Feature {
    let mut f = *f;
    normalize_halves(&mut f);
    f.map(|v| v as f32)
}

/// Each matched exemplar patch votes on the cells its footprint covers around
/// the generated center. Cells outside `dilate(support, λ_patch)` never turn on.
pub fn blend_and_vote(
    generated: &[Patch],
    matches: &[usize],
    exemplar: &[Patch],
    current: &VoxelGrid,
    cfg: &ConsistencyConfig,
    allowed: &std::collections::BTreeSet<Coord>,
) -> VoxelGrid {
    // covering count, occupied votes, summed features
    let mut acc: BTreeMap<Coord, (u32, u32, [f64; FEATURE_DIM])> = BTreeMap::new();
    for (g, &m) in generated.iter().zip(matches) {
        let e = &exemplar[m];
        let placed = Patch { center: g.center, ..e.clone() };
        for i in 0..e.volume() {
            let c = placed.cell(i);
            if !in_bounds(c, current.resolution) || !allowed.contains(&c) {
                continue;
            }
            let entry = acc.entry(c).or_insert((0, 0, [0.0; FEATURE_DIM]));
            entry.0 += 1;
            if e.is_occupied(i) {
                entry.1 += 1;
                for (s, v) in entry.2.iter_mut().zip(&e.features[i]) {
                    *s += *v as f64;
                }
            }
        }
    }
    let mut out = VoxelGrid::new(current.resolution, current.bounds);
    for (c, (n, votes, sum)) in acc {
        if votes as f64 / n as f64 >= cfg.beta {
            out.cells.insert(c, CellData { feature: Some(normalized(&sum)), ..Default::default() });
        }
    }
    out
}

/// Iterated match and vote; expansion is measured against `gca`'s support.
pub fn run_consistency(gca: &VoxelGrid, exemplar: &VoxelGrid, cfg: &ConsistencyConfig) -> Result<VoxelGrid> {
    cfg.validate()?;
    if exemplar.is_empty() {
        return Err(Error::Parameter("empty exemplar".into()));
    }
    if gca.resolution != exemplar.resolution {
        return Err(Error::Shape(format!(
            "resolutions differ: generated {} vs exemplar {}",
            gca.resolution, exemplar.resolution
        )));
    }
    if !gca.is_featured() || !exemplar.is_featured() {
        return Err(Error::State("consistency needs featured grids".into()));
    }
    let mut current = gca.occupancy_only();
    for (c, d) in &gca.cells {
        let f = d.feature.unwrap().map(|v| v as f64);
        current.cells.get_mut(c).unwrap().feature = Some(normalized(&f));
    }
    if cfg.iterations == 0 {
        return Ok(current);
    }
    let allowed = dilate(gca.cells.keys(), cfg.lambda_patch, gca.resolution).into_iter().collect();
    let ex_patches = extract_patches(exemplar, cfg.l);
    for _ in 0..cfg.iterations {
        if current.is_empty() {
            break;
        }
        let patches = extract_patches(&current, cfg.l);
        let matches = match_exhaustive(&patches, &ex_patches, cfg.w)?;
        current = blend_and_vote(&patches, &matches, &ex_patches, &current, cfg, &allowed);
    }
    Ok(current)
}

fn half_cosine_score(a: &Feature, b: &Feature) -> f64 {
    let mut s = 0.0;
    for h in 0..2 {
        let r = h * HALF_DIM..(h + 1) * HALF_DIM;
        let (mut d, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
        for k in r {
            d += a[k] as f64 * b[k] as f64;
            na += (a[k] as f64).powi(2);
            nb += (b[k] as f64).powi(2);
        }
        let den = (na * nb).sqrt();
        if den > 0.0 {
            s += d / den;
        }
    }
    s
}

/// For every voxel, the exemplar cell whose feature has the highest summed
/// per-half cosine similarity; ties go to the first cell in coordinate order.
pub fn remap_voxelwise_nn(grid: &VoxelGrid, exemplar: &VoxelGrid) -> Result<BTreeMap<Coord, Coord>> {
    if exemplar.is_empty() {
        return Err(Error::Parameter("empty exemplar".into()));
    }
    let ex: Vec<(Coord, Feature)> =
        exemplar.cells.iter().map(|(c, d)| (*c, d.feature.unwrap_or([0.0; FEATURE_DIM]))).collect();
    let one = |f: &Feature| {
        let mut best = (ex[0].0, f64::NEG_INFINITY);
        for (c, e) in &ex {
            let s = half_cosine_score(f, e);
            if s > best.1 {
                best = (*c, s);
            }
        }
        best.0
    };
    let cells: Vec<(Coord, Feature)> =
        grid.cells.iter().map(|(c, d)| (*c, d.feature.unwrap_or([0.0; FEATURE_DIM]))).collect();
    #[cfg(feature = "parallel")]
    let mapped: Vec<Coord> = {
        use rayon::prelude::*;
        cells.par_iter().map(|(_, f)| one(f)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let mapped: Vec<Coord> = cells.iter().map(|(_, f)| one(f)).collect();
    Ok(cells.iter().map(|(c, _)| *c).zip(mapped).collect())
}

/// Maps every voxel to the center of the exemplar patch that best matches the
/// patch around it.
pub fn remap_patchwise_nn(grid: &VoxelGrid, exemplar: &VoxelGrid, l: usize, w: f64) -> Result<BTreeMap<Coord, Coord>> {
    if exemplar.is_empty() {
        return Err(Error::Parameter("empty exemplar".into()));
    }
    let g = extract_patches(grid, l);
    let e = extract_patches(exemplar, l);
    let m = match_exhaustive(&g, &e, w)?;
    Ok(g.iter().zip(m).map(|(p, j)| (p.center, e[j].center)).collect())
}

/// Result of [`transplant_gaussians`].
#[derive(Debug, Clone, PartialEq)]
pub struct Transplant {
    pub cloud: SplatCloud,
    /// Voxels whose source cell holds no Gaussians.
    pub skipped: usize,
}

/// Copies the Gaussians of each mapped exemplar cell into the target voxel,
/// shifted by the difference of cell centers. `exemplar_grid` must carry
/// per-cell Gaussian indices into `exemplar_cloud`; `target` supplies the
/// destination geometry.
pub fn transplant_gaussians(
    mapping: &BTreeMap<Coord, Coord>,
    exemplar_cloud: &SplatCloud,
    exemplar_grid: &VoxelGrid,
    target: &VoxelGrid,
) -> Result<Transplant> {
    let mut indices = Vec::new();
    let mut shifts = Vec::new();
    let mut skipped = 0;
    for (dst, src) in mapping {
        let payload = exemplar_grid.cells.get(src).map(|d| d.gaussian_indices.as_slice()).unwrap_or(&[]);
        if payload.is_empty() {
            skipped += 1;
            continue;
        }
        let a = exemplar_grid.cell_center(*src);
        let b = target.cell_center(*dst);
        let shift = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        for &i in payload {
            if i as usize >= exemplar_cloud.len() {
                return Err(Error::Validation(format!("cell payload index {i} outside cloud")));
            }
            indices.push(i as usize);
            shifts.push(shift);
        }
    }
    let mut cloud = exemplar_cloud.select(&indices);
    for (p, s) in cloud.positions.iter_mut().zip(&shifts) {
        for k in 0..3 {
            p[k] = (p[k] as f64 + s[k]) as f32;
        }
    }
    Ok(Transplant { cloud, skipped })
}
