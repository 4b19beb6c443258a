//! Sparse surface-voxel grids: construction from splat clouds, representative
//! features, the resolution hierarchy, coarse upsampling, mesh voxelization and
//! the JSON interchange used by the CLI, the service and the browser UI.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::coord::Coord;
use crate::splat_io::SplatCloud;
use crate::{Error, Feature, Result};

/// Axis-aligned box in scene units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[[f64; 3]; 2]", into = "[[f64; 3]; 2]")]
pub struct Bounds {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl From<[[f64; 3]; 2]> for Bounds {
    fn from(v: [[f64; 3]; 2]) -> Self {
        Self { lo: v[0], hi: v[1] }
    }
}

impl From<Bounds> for [[f64; 3]; 2] {
    fn from(b: Bounds) -> Self {
        [b.lo, b.hi]
    }
}

impl Bounds {
    pub fn new(lo: [f64; 3], hi: [f64; 3]) -> Self {
        Self { lo, hi }
    }

    pub fn unit() -> Self {
        Self::new([0.0; 3], [1.0; 3])
    }

    pub fn extent(&self) -> [f64; 3] {
        [self.hi[0] - self.lo[0], self.hi[1] - self.lo[1], self.hi[2] - self.lo[2]]
    }

    pub fn is_degenerate(&self) -> bool {
        self.extent().iter().any(|e| !(*e > 0.0) || !e.is_finite())
    }

    /// Cube with the same center whose side is the largest extent.
    pub fn cubified(&self) -> Self {
        let e = self.extent();
        let side = e[0].max(e[1]).max(e[2]);
        let mut out = *self;
        for a in 0..3 {
            let c = 0.5 * (self.lo[a] + self.hi[a]);
            out.lo[a] = c - 0.5 * side;
            out.hi[a] = c + 0.5 * side;
        }
        out
    }

    /// Grown by `frac` of the extent on every axis (half on each side).
    pub fn expanded(&self, frac: f64) -> Self {
        let e = self.extent();
        let mut out = *self;
        for a in 0..3 {
            let pad = 0.5 * frac * if e[a] > 0.0 { e[a] } else { 1.0 };
            out.lo[a] -= pad;
            out.hi[a] += pad;
        }
        out
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] <= self.hi[a])
    }
}

/// Default voxelization bounds: center AABB expanded by 1% and cubified.
pub fn default_bounds(cloud: &SplatCloud) -> Option<Bounds> {
    let (lo, hi) = cloud.center_bounds()?;
    Some(Bounds::new(lo, hi).expanded(0.01).cubified())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CellData {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<Feature>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gaussian_indices: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub representative_index: Option<u32>,
}

/// Sparse grid of `resolution³` cells over `bounds`, keyed in sorted order.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub resolution: u32,
    pub bounds: Bounds,
    pub cells: BTreeMap<Coord, CellData>,
}

impl VoxelGrid {
    pub fn new(resolution: u32, bounds: Bounds) -> Self {
        Self { resolution, bounds, cells: BTreeMap::new() }
    }

    /// Occupancy-only grid from a list of coordinates (out-of-range ones are an error).
    pub fn from_coords(resolution: u32, bounds: Bounds, coords: impl IntoIterator<Item = Coord>) -> Result<Self> {
        let mut g = Self::new(resolution, bounds);
        for c in coords {
            g.insert(c, CellData::default())?;
        }
        Ok(g)
    }

    pub fn insert(&mut self, c: Coord, data: CellData) -> Result<()> {
        if !self.in_bounds(c) {
            return Err(Error::Parameter(format!("cell {c:?} outside [0,{})^3", self.resolution)));
        }
        self.cells.insert(c, data);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn in_bounds(&self, c: Coord) -> bool {
        crate::coord::in_bounds(c, self.resolution)
    }

    pub fn contains(&self, c: &Coord) -> bool {
        self.cells.contains_key(c)
    }

    pub fn coords(&self) -> Vec<Coord> {
        self.cells.keys().copied().collect()
    }

    pub fn occupancy(&self) -> BTreeSet<Coord> {
        self.cells.keys().copied().collect()
    }

    pub fn feature(&self, c: &Coord) -> Option<&Feature> {
        self.cells.get(c).and_then(|d| d.feature.as_ref())
    }

    pub fn is_featured(&self) -> bool {
        self.cells.values().all(|d| d.feature.is_some())
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        let e = self.bounds.extent();
        e.map(|v| v / self.resolution as f64)
    }

    pub fn cell_center(&self, c: Coord) -> [f64; 3] {
        let s = self.voxel_size();
        [0, 1, 2].map(|a| self.bounds.lo[a] + (c[a] as f64 + 0.5) * s[a])
    }

    /// Half-open binning; points on the upper boundary go to the last cell.
    pub fn cell_of(&self, p: [f64; 3]) -> Option<Coord> {
        if !self.bounds.contains(p) {
            return None;
        }
        let r = self.resolution as i32;
        let e = self.bounds.extent();
        let mut c = [0i32; 3];
        for a in 0..3 {
            let t = (p[a] - self.bounds.lo[a]) / e[a] * self.resolution as f64;
            c[a] = (t.floor() as i32).clamp(0, r - 1);
        }
        Some(c)
    }

    /// Same cells without features or payload.
    pub fn occupancy_only(&self) -> Self {
        Self {
            resolution: self.resolution,
            bounds: self.bounds,
            cells: self.cells.keys().map(|&c| (c, CellData::default())).collect(),
        }
    }
}

/// Intersection-over-union of two occupancy sets.
pub fn occupancy_iou(a: &VoxelGrid, b: &VoxelGrid) -> f64 {
    let inter = a.cells.keys().filter(|c| b.cells.contains_key(*c)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelizerConfig {
    pub eta_thres: f64,
    /// Permit resolutions other than 16, 32, 64 and 128.
    pub allow_any_resolution: bool,
}

impl Default for VoxelizerConfig {
    fn default() -> Self {
        Self { eta_thres: 0.1, allow_any_resolution: false }
    }
}

pub const STANDARD_RESOLUTIONS: [u32; 4] = [16, 32, 64, 128];

fn check_resolution(r: u32, cfg: &VoxelizerConfig) -> Result<()> {
    if cfg.allow_any_resolution && r >= 1 {
        return Ok(());
    }
    if !STANDARD_RESOLUTIONS.contains(&r) {
        return Err(Error::Parameter(format!("resolution {r} not in {STANDARD_RESOLUTIONS:?}")));
    }
    Ok(())
}

/// Counts reported by [`build_surface_voxels`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BuildReport {
    pub outside_bounds: usize,
}

fn representative(cloud: &SplatCloud, indices: &[u32]) -> Option<u32> {
    let mut best: Option<(u32, f64)> = None;
    for &i in indices {
        let eta = cloud.opacity(i as usize);
        let better = match best {
            None => true,
            Some((bi, be)) => eta > be || (eta == be && i < bi),
        };
        if better {
            best = Some((i, eta));
        }
    }
    best.map(|b| b.0)
}

/// Instantiates every cell containing a Gaussian center with opacity above the threshold.
pub fn build_surface_voxels(
    cloud: &SplatCloud,
    bounds: Bounds,
    resolution: u32,
    cfg: &VoxelizerConfig,
) -> Result<(VoxelGrid, BuildReport)> {
    check_resolution(resolution, cfg)?;
    if !(cfg.eta_thres > 0.0 && cfg.eta_thres < 1.0) {
        return Err(Error::Parameter(format!("eta_thres must be in (0,1), got {}", cfg.eta_thres)));
    }
    if bounds.is_degenerate() {
        return Err(Error::Parameter("degenerate voxelization bounds".into()));
    }
    let mut grid = VoxelGrid::new(resolution, bounds);
    let mut report = BuildReport::default();
    let mut bins: BTreeMap<Coord, (Vec<u32>, bool)> = BTreeMap::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        let p = p.map(|v| v as f64);
        let Some(c) = grid.cell_of(p) else {
            report.outside_bounds += 1;
            continue;
        };
        let entry = bins.entry(c).or_default();
        entry.0.push(i as u32);
        entry.1 |= cloud.opacity(i) > cfg.eta_thres;
    }
    for (c, (indices, surface)) in bins {
        if surface {
            let rep = representative(cloud, &indices);
            grid.cells.insert(c, CellData { feature: None, gaussian_indices: indices, representative_index: rep });
        }
    }
    Ok((grid, report))
}

/// Sets each cell's feature to the reduced feature of its highest-opacity Gaussian.
pub fn assign_representative_features(grid: &VoxelGrid, cloud: &SplatCloud) -> Result<VoxelGrid> {
    let feats = cloud.reduced_features.as_ref().ok_or_else(|| Error::State("cloud has no reduced features".into()))?;
    let mut out = grid.clone();
    for data in out.cells.values_mut() {
        if let Some(rep) = representative(cloud, &data.gaussian_indices) {
            data.representative_index = Some(rep);
            data.feature = Some(feats[rep as usize]);
        }
    }
    Ok(out)
}

/// Halves the resolution: a coarse cell is occupied iff any child is.
pub fn downsample(grid: &VoxelGrid) -> Result<VoxelGrid> {
    if grid.resolution < 2 || grid.resolution % 2 != 0 {
        return Err(Error::Parameter(format!("cannot downsample resolution {}", grid.resolution)));
    }
    let mut out = VoxelGrid::new(grid.resolution / 2, grid.bounds);
    for (c, d) in &grid.cells {
        let entry = out.cells.entry(crate::coord::parent(*c)).or_default();
        entry.gaussian_indices.extend_from_slice(&d.gaussian_indices);
    }
    for d in out.cells.values_mut() {
        d.gaussian_indices.sort_unstable();
    }
    Ok(out)
}

/// Repeated [`downsample`] down to `target` resolution.
pub fn downsample_to(grid: &VoxelGrid, target: u32) -> Result<VoxelGrid> {
    ratio(target, grid.resolution)?;
    let mut g = grid.clone();
    while g.resolution > target {
        g = downsample(&g)?;
    }
    Ok(g)
}

fn ratio(coarse: u32, fine: u32) -> Result<u32> {
    if coarse == 0 || fine < coarse || fine % coarse != 0 || !(fine / coarse).is_power_of_two() {
        return Err(Error::Parameter(format!("{fine}/{coarse} is not a power-of-two ratio")));
    }
    Ok(fine / coarse)
}

/// Expands every coarse cell into its full block of fine cells.
pub fn upsample_coarse(grid: &VoxelGrid, target: u32) -> Result<VoxelGrid> {
    let k = ratio(grid.resolution, target)? as i32;
    let mut out = VoxelGrid::new(target, grid.bounds);
    for c in grid.cells.keys() {
        for dx in 0..k {
            for dy in 0..k {
                for dz in 0..k {
                    out.cells.insert([c[0] * k + dx, c[1] * k + dy, c[2] * k + dz], CellData::default());
                }
            }
        }
    }
    Ok(out)
}

/// Levels from finest to coarsest; `downsample(levels[i]) == levels[i + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelHierarchy {
    pub levels: Vec<VoxelGrid>,
}

impl VoxelHierarchy {
    pub fn level(&self, resolution: u32) -> Option<&VoxelGrid> {
        self.levels.iter().find(|g| g.resolution == resolution)
    }
}

pub fn build_hierarchy(
    cloud: &SplatCloud,
    bounds: Bounds,
    finest: u32,
    coarsest: u32,
    cfg: &VoxelizerConfig,
) -> Result<(VoxelHierarchy, BuildReport)> {
    ratio(coarsest, finest)?;
    let (grid, report) = build_surface_voxels(cloud, bounds, finest, cfg)?;
    let mut levels = vec![grid];
    while levels.last().unwrap().resolution > coarsest {
        let next = downsample(levels.last().unwrap())?;
        levels.push(next);
    }
    Ok((VoxelHierarchy { levels }, report))
}

pub type Triangle = [[f64; 3]; 3];

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Separating-axis test of a triangle against the closed box `center ± half`.
pub fn triangle_box_overlap(tri: &Triangle, center: [f64; 3], half: [f64; 3]) -> bool {
    let v = tri.map(|p| sub(p, center));
    let edges = [sub(v[1], v[0]), sub(v[2], v[1]), sub(v[0], v[2])];
    let separated = |axis: [f64; 3]| {
        let p = v.map(|vi| dot(vi, axis));
        let r = half[0] * axis[0].abs() + half[1] * axis[1].abs() + half[2] * axis[2].abs();
        let (mn, mx) = (p[0].min(p[1]).min(p[2]), p[0].max(p[1]).max(p[2]));
        mn > r || mx < -r
    };
    for a in 0..3 {
        let mut e = [0.0; 3];
        e[a] = 1.0;
        if separated(e) {
            return false;
        }
        for edge in &edges {
            let axis = cross(e, *edge);
            if dot(axis, axis) > 0.0 && separated(axis) {
                return false;
            }
        }
    }
    !separated(cross(edges[0], edges[1]))
}

/// Conservative surface voxelization (no interior fill). Returns the grid and
/// the number of skipped zero-area triangles.
pub fn voxelize_mesh(triangles: &[Triangle], bounds: Bounds, resolution: u32) -> Result<(VoxelGrid, usize)> {
    if bounds.is_degenerate() || resolution == 0 {
        return Err(Error::Parameter("degenerate mesh voxelization grid".into()));
    }
    if triangles.iter().flatten().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite triangle vertex".into()));
    }
    let mut grid = VoxelGrid::new(resolution, bounds);
    let size = grid.voxel_size();
    let half = size.map(|s| 0.5 * s);
    let r = resolution as i32;
    let mut degenerate = 0;
    for tri in triangles {
        let n = cross(sub(tri[1], tri[0]), sub(tri[2], tri[0]));
        if dot(n, n) == 0.0 {
            degenerate += 1;
            continue;
        }
        let mut lo = [0i32; 3];
        let mut hi = [0i32; 3];
        for a in 0..3 {
            let mn = tri.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min);
            let mx = tri.iter().map(|p| p[a]).fold(f64::NEG_INFINITY, f64::max);
            lo[a] = (((mn - bounds.lo[a]) / size[a]).floor() as i32 - 1).max(0);
            hi[a] = (((mx - bounds.lo[a]) / size[a]).floor() as i32 + 1).min(r - 1);
        }
        for i in lo[0]..=hi[0] {
            for j in lo[1]..=hi[1] {
                for k in lo[2]..=hi[2] {
                    let c = [i, j, k];
                    if !grid.cells.contains_key(&c) && triangle_box_overlap(tri, grid.cell_center(c), half) {
                        grid.cells.insert(c, CellData::default());
                    }
                }
            }
        }
    }
    Ok((grid, degenerate))
}

/// One cell of the JSON interchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonCell {
    pub xyz: Coord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gaussians: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub representative: Option<u32>,
}

/// `{resolution, bounds: [lo, hi], cells: [{xyz, feature?}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelGridJson {
    pub resolution: u32,
    pub bounds: Bounds,
    pub cells: Vec<JsonCell>,
}

impl VoxelGrid {
    /// Interchange form; `with_payload` also writes Gaussian indices.
    pub fn to_json_value(&self, with_payload: bool) -> VoxelGridJson {
        VoxelGridJson {
            resolution: self.resolution,
            bounds: self.bounds,
            cells: self
                .cells
                .iter()
                .map(|(c, d)| JsonCell {
                    xyz: *c,
                    feature: d.feature.map(|f| f.to_vec()),
                    gaussians: (with_payload && !d.gaussian_indices.is_empty()).then(|| d.gaussian_indices.clone()),
                    representative: if with_payload { d.representative_index } else { None },
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_json_value(false)).expect("grid serializes")
    }

    pub fn from_json_value(v: VoxelGridJson) -> Result<Self> {
        if v.resolution == 0 {
            return Err(Error::Validation("resolution must be positive".into()));
        }
        if v.bounds.is_degenerate() {
            return Err(Error::Validation("degenerate bounds".into()));
        }
        let mut g = VoxelGrid::new(v.resolution, v.bounds);
        for cell in v.cells {
            if !g.in_bounds(cell.xyz) {
                return Err(Error::Validation(format!("cell {:?} outside [0,{})^3", cell.xyz, v.resolution)));
            }
            let feature = match cell.feature {
                Some(f) => {
                    let f: Feature = f
                        .try_into()
                        .map_err(|f: Vec<f32>| Error::Validation(format!("feature has {} entries, need 8", f.len())))?;
                    if f.iter().any(|x| !x.is_finite()) {
                        return Err(Error::Validation("non-finite feature".into()));
                    }
                    Some(f)
                }
                None => None,
            };
            let data = CellData {
                feature,
                gaussian_indices: cell.gaussians.unwrap_or_default(),
                representative_index: cell.representative,
            };
            if g.cells.insert(cell.xyz, data).is_some() {
                return Err(Error::Validation(format!("duplicate cell {:?}", cell.xyz)));
            }
        }
        Ok(g)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_json_value(serde_json::from_str(s)?)
    }
}
