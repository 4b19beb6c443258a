//! Primitive archives, exemplar brushes, conditioning edits, layers and scenes.
//!
//! Archive layout (little-endian): `b"SGPA"`, `u32` version, `u32` section
//! count, then per section a `u16` name length, the UTF-8 name, a `u64` byte
//! length and the payload. Sections: `meta` (JSON), `model` (model file),
//! `target` and `coarse` (VoxelGrid JSON), `cloud` (splat file).

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coord::{in_bounds, Coord};
use crate::feature_field::{FeatureConfig, FeatureReducer};
use crate::gca::{run_sampler, GcaState, SamplerConfig};
use crate::gca_train::{train_primitive, ExemplarVoxels, TrainAbort, TrainConfig, TrainLogRecord, TrainProgress};
use crate::patch_consistency::{remap_voxelwise_nn, run_consistency, transplant_gaussians, ConsistencyConfig};
use crate::sparse_net::{deserialize_model, serialize_model, TransitionKernelModel};
use crate::splat_io::{
    clip_scales, parse_splat_file, serialize_splat_file, transform_cloud, SimilarityTransform, SplatCloud,
};
use crate::voxelizer::{
    assign_representative_features, build_surface_voxels, default_bounds, downsample_to, voxelize_mesh, Bounds,
    CellData, Triangle, VoxelGrid, VoxelizerConfig,
};
use crate::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"SGPA";
pub const ARCHIVE_VERSION: u32 = 1;

/// Generation-time settings stored with a primitive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveConfig {
    pub target_resolution: u32,
    pub coarse_resolution: u32,
    pub bounds: Bounds,
    pub voxel_size: f64,
    pub sampler: SamplerConfig,
    pub consistency: ConsistencyConfig,
    pub use_consistency: bool,
}

impl PrimitiveConfig {
    pub fn new(target_resolution: u32, coarse_resolution: u32, bounds: Bounds) -> Self {
        Self {
            target_resolution,
            coarse_resolution,
            bounds,
            voxel_size: bounds.extent()[0] / target_resolution as f64,
            sampler: SamplerConfig::default(),
            consistency: ConsistencyConfig::default(),
            use_consistency: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrimitiveMetadata {
    pub name: String,
    pub seed: u64,
    pub created: String,
    pub iterations: usize,
    pub train_config: Option<TrainConfig>,
    pub train_log: Vec<TrainLogRecord>,
}

/// Everything needed to generate from a trained primitive.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveArchive {
    pub model: TransitionKernelModel<f32>,
    /// Featured target grid with per-cell Gaussian indices into `cloud`.
    pub target: VoxelGrid,
    pub coarse: VoxelGrid,
    pub reducer: FeatureReducer,
    pub cloud: SplatCloud,
    pub config: PrimitiveConfig,
    pub metadata: PrimitiveMetadata,
}

#[derive(Serialize, Deserialize)]
struct ArchiveMeta {
    config: PrimitiveConfig,
    metadata: PrimitiveMetadata,
    reducer: FeatureReducer,
}

fn put_section(out: &mut Vec<u8>, name: &str, bytes: &[u8]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn read_sections(bytes: &[u8]) -> Result<BTreeMap<String, &[u8]>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or(Error::Length { expected: pos + n, found: bytes.len() })?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(4)? != ARCHIVE_MAGIC {
        return Err(Error::Format("not a primitive archive (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != ARCHIVE_VERSION {
        return Err(Error::Format(format!("unsupported archive version {version}")));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
    let mut sections = BTreeMap::new();
    for _ in 0..count {
        let n = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(n)?).map_err(|_| Error::Format("section name is not UTF-8".into()))?;
        let len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let body = take(len)?;
        if sections.insert(name.to_string(), body).is_some() {
            return Err(Error::Format(format!("duplicate section {name}")));
        }
    }
    if pos != bytes.len() {
        return Err(Error::Format("trailing bytes after archive sections".into()));
    }
    Ok(sections)
}

impl PrimitiveArchive {
    /// Checks the stored coarse grid against the target and model shapes.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        if self.target.resolution != c.target_resolution || self.coarse.resolution != c.coarse_resolution {
            return Err(Error::Validation("grid resolutions disagree with config".into()));
        }
        if downsample_to(&self.target.occupancy_only(), c.coarse_resolution)? != self.coarse.occupancy_only() {
            return Err(Error::Validation("coarse grid is not the downsampled target".into()));
        }
        let n = self.cloud.len();
        for d in self.target.cells.values() {
            if d.gaussian_indices.iter().any(|&i| i as usize >= n) {
                return Err(Error::Validation("target payload index outside cloud".into()));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = ArchiveMeta { config: self.config, metadata: self.metadata.clone(), reducer: self.reducer.clone() };
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&5u32.to_le_bytes());
        put_section(&mut out, "meta", &serde_json::to_vec(&meta)?);
        put_section(&mut out, "model", &serialize_model(&self.model));
        put_section(&mut out, "target", &serde_json::to_vec(&self.target.to_json_value(true))?);
        put_section(&mut out, "coarse", self.coarse.to_json().as_bytes());
        put_section(&mut out, "cloud", &serialize_splat_file(&self.cloud)?);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let s = read_sections(bytes)?;
        let get = |name: &str| s.get(name).copied().ok_or_else(|| Error::Format(format!("missing section {name}")));
        let meta: ArchiveMeta = serde_json::from_slice(get("meta")?)?;
        let text = |name: &str| -> Result<&str> {
            std::str::from_utf8(get(name)?).map_err(|_| Error::Format(format!("section {name} is not UTF-8")))
        };
        let archive = Self {
            model: deserialize_model(get("model")?)?,
            target: VoxelGrid::from_json(text("target")?)?,
            coarse: VoxelGrid::from_json(text("coarse")?)?,
            reducer: meta.reducer,
            cloud: parse_splat_file(get("cloud")?)?,
            config: meta.config,
            metadata: meta.metadata,
        };
        archive.validate()?;
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn exemplar(&self) -> ExemplarVoxels {
        ExemplarVoxels { target: self.target.clone(), coarse: self.coarse.clone() }
    }
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Parameter(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Exemplar voxels of a splat selection: fitted reduction, featured target
/// grid at `target_resolution` and its coarse grid. Scales are clipped to the
/// target voxel size.
pub fn prepare_exemplar(
    cloud: &SplatCloud,
    target_resolution: u32,
    coarse_resolution: u32,
    voxelizer: &VoxelizerConfig,
    bounds: Option<Bounds>,
) -> Result<(SplatCloud, FeatureReducer, ExemplarVoxels, PrimitiveConfig)> {
    let bounds = match bounds {
        Some(b) => b,
        None => default_bounds(cloud).ok_or_else(|| Error::Parameter("empty selection".into()))?,
    };
    let cfg = PrimitiveConfig::new(target_resolution, coarse_resolution, bounds);
    let mut cloud = clip_scales(cloud, cfg.voxel_size)?;
    let reducer = FeatureReducer::fit(&cloud, FeatureConfig::default())?;
    cloud.reduced_features = Some(reducer.reduce(&cloud)?);
    let (grid, _) = build_surface_voxels(&cloud, bounds, target_resolution, voxelizer)?;
    if grid.is_empty() {
        return Err(Error::Parameter("selection has no surface voxels".into()));
    }
    let grid = assign_representative_features(&grid, &cloud)?;
    let exemplar = ExemplarVoxels::new(grid, coarse_resolution)?;
    Ok((cloud, reducer, exemplar, cfg))
}

/// Trains a primitive on a prepared exemplar and packages it. The stored
/// cloud keeps only the Gaussian payload (per-point features are dropped).
pub fn build_primitive(
    mut cloud: SplatCloud,
    reducer: FeatureReducer,
    exemplar: ExemplarVoxels,
    config: PrimitiveConfig,
    train: &TrainConfig,
    name: &str,
    progress: &mut dyn FnMut(&TrainProgress),
) -> std::result::Result<PrimitiveArchive, TrainAbort> {
    let outcome = train_primitive(&exemplar, train, progress)?;
    cloud.reduced_features = None;
    cloud.raw_features = None;
    Ok(PrimitiveArchive {
        model: outcome.model,
        target: exemplar.target,
        coarse: exemplar.coarse,
        reducer,
        cloud,
        config,
        metadata: PrimitiveMetadata {
            name: name.to_string(),
            seed: train.seed,
            created: format!("genprim {}", env!("CARGO_PKG_VERSION")),
            iterations: train.schedule.iterations,
            train_config: Some(*train),
            train_log: outcome.log,
        },
    })
}

/// Coarse occupancy stamp with its minimum corner at the origin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Brush {
    pub name: String,
    pub size: [i32; 3],
    pub cells: BTreeSet<Coord>,
}

pub fn extract_brush(selection: &VoxelGrid, name: &str) -> Result<Brush> {
    if selection.is_empty() {
        return Err(Error::Parameter("cannot extract a brush from an empty selection".into()));
    }
    let mut lo = [i32::MAX; 3];
    let mut hi = [i32::MIN; 3];
    for c in selection.cells.keys() {
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let cells = selection.cells.keys().map(|c| [c[0] - lo[0], c[1] - lo[1], c[2] - lo[2]]).collect();
    Ok(Brush { name: name.to_string(), size: [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1], cells })
}

impl Brush {
    pub fn stamped(&self, offset: Coord) -> impl Iterator<Item = Coord> + '_ {
        self.cells.iter().map(move |c| [c[0] + offset[0], c[1] + offset[1], c[2] + offset[2]])
    }
}

/// One conditioning edit; the JSON form is the edit log the UI replays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ConditioningEdit {
    Stamp { brush: Brush, offset: Coord },
    Add { cell: Coord },
    Remove { cell: Coord },
    Mesh { triangles: Vec<Triangle> },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EditReport {
    /// Index and reason of every rejected edit.
    pub rejected: Vec<(usize, String)>,
}

/// Applies `edits` in order to an empty grid; edits touching cells outside
/// the grid are rejected whole and reported.
pub fn assemble_conditioning(resolution: u32, bounds: Bounds, edits: &[ConditioningEdit]) -> (VoxelGrid, EditReport) {
    let mut grid = VoxelGrid::new(resolution, bounds);
    let mut report = EditReport::default();
    for (i, e) in edits.iter().enumerate() {
        if let Err(reason) = apply_edit(&mut grid, e) {
            report.rejected.push((i, reason));
        }
    }
    (grid, report)
}

pub fn apply_edit(grid: &mut VoxelGrid, edit: &ConditioningEdit) -> std::result::Result<(), String> {
    let r = grid.resolution;
    let oob = |c: Coord| format!("cell {c:?} outside {r}³ grid");
    match edit {
        ConditioningEdit::Add { cell } => {
            if !in_bounds(*cell, r) {
                return Err(oob(*cell));
            }
            grid.cells.insert(*cell, CellData::default());
        }
        ConditioningEdit::Remove { cell } => {
            if !in_bounds(*cell, r) {
                return Err(oob(*cell));
            }
            grid.cells.remove(cell);
        }
        ConditioningEdit::Stamp { brush, offset } => {
            if let Some(c) = brush.stamped(*offset).find(|c| !in_bounds(*c, r)) {
                return Err(oob(c));
            }
            for c in brush.stamped(*offset) {
                grid.cells.insert(c, CellData::default());
            }
        }
        ConditioningEdit::Mesh { triangles } => {
            let (mesh, _) = voxelize_mesh(triangles, grid.bounds, r).map_err(|e| e.to_string())?;
            for c in mesh.cells.into_keys() {
                grid.cells.insert(c, CellData::default());
            }
        }
    }
    Ok(())
}

/// Generated content placed in a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub id: String,
    pub primitive_id: String,
    pub seed: u64,
    pub cloud: SplatCloud,
    pub grid: VoxelGrid,
    pub conditioning: VoxelGrid,
    pub transform: SimilarityTransform,
    pub gain: [f32; 3],
}

/// Options for [`generate_layer`]; sampler and consistency settings default
/// to the primitive's.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub sampler: Option<SamplerConfig>,
    pub consistency: Option<ConsistencyConfig>,
    pub use_consistency: Option<bool>,
}

/// Sampler, consistency refinement and Gaussian transplant.
pub fn generate_layer(
    primitive: &PrimitiveArchive,
    primitive_id: &str,
    conditioning: &VoxelGrid,
    seed: u64,
    options: &GenerateOptions,
    on_step: &mut dyn FnMut(usize, &GcaState),
) -> Result<Layer> {
    let c = &primitive.config;
    if conditioning.is_empty() {
        return Err(Error::Parameter("empty conditioning".into()));
    }
    if conditioning.resolution != c.coarse_resolution {
        return Err(Error::Parameter(format!(
            "conditioning resolution {} does not match primitive coarse resolution {}",
            conditioning.resolution, c.coarse_resolution
        )));
    }
    let sampler = SamplerConfig { seed, ..options.sampler.unwrap_or(c.sampler) };
    let state = run_sampler(&primitive.model, conditioning, c.target_resolution, &sampler, on_step)?;
    let mut grid = state.to_grid(c.bounds);
    if options.use_consistency.unwrap_or(c.use_consistency) && !grid.is_empty() {
        grid = run_consistency(&grid, &primitive.target, &options.consistency.unwrap_or(c.consistency))?;
    }
    let mapping = remap_voxelwise_nn(&grid, &primitive.target)?;
    let t = transplant_gaussians(&mapping, &primitive.cloud, &primitive.target, &grid)?;
    Ok(Layer {
        id: String::new(),
        primitive_id: primitive_id.to_string(),
        seed,
        cloud: t.cloud,
        grid,
        conditioning: conditioning.occupancy_only(),
        transform: SimilarityTransform::identity(),
        gain: [1.0; 3],
    })
}

/// Serializable view of a layer without its point payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDescription {
    pub id: String,
    pub primitive_id: String,
    pub seed: u64,
    pub points: usize,
    pub transform: SimilarityTransform,
    pub gain: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub layers: Vec<LayerDescription>,
    pub static_regions: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    pub layers: Vec<Layer>,
    pub static_regions: Vec<SplatCloud>,
}

impl Scene {
    pub fn layer(&self, id: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn layer_mut(&mut self, id: &str) -> Option<&mut Layer> {
        self.layers.iter_mut().find(|l| l.id == id)
    }

    pub fn add_layer(&mut self, layer: Layer) -> Result<()> {
        if layer.id.is_empty() {
            return Err(Error::Parameter("layer id must not be empty".into()));
        }
        if self.layer(&layer.id).is_some() {
            return Err(Error::Parameter(format!("duplicate layer id {}", layer.id)));
        }
        check_layer(&layer)?;
        self.layers.push(layer);
        Ok(())
    }

    pub fn remove_layer(&mut self, id: &str) -> Option<Layer> {
        let i = self.layers.iter().position(|l| l.id == id)?;
        Some(self.layers.remove(i))
    }

    pub fn duplicate_layer(&mut self, id: &str, new_id: &str) -> Result<()> {
        let mut copy = self.layer(id).ok_or_else(|| Error::Parameter(format!("unknown layer {id}")))?.clone();
        copy.id = new_id.to_string();
        self.add_layer(copy)
    }

    /// Replaces transform and gain of a layer.
    pub fn update_layer(&mut self, id: &str, transform: SimilarityTransform, gain: [f32; 3]) -> Result<()> {
        let layer = self.layer_mut(id).ok_or_else(|| Error::Parameter(format!("unknown layer {id}")))?;
        let mut updated = layer.clone();
        updated.transform = transform;
        updated.gain = gain;
        check_layer(&updated)?;
        *layer = updated;
        Ok(())
    }

    pub fn describe(&self) -> SceneDescription {
        SceneDescription {
            layers: self
                .layers
                .iter()
                .map(|l| LayerDescription {
                    id: l.id.clone(),
                    primitive_id: l.primitive_id.clone(),
                    seed: l.seed,
                    points: l.cloud.len(),
                    transform: l.transform,
                    gain: l.gain,
                })
                .collect(),
            static_regions: self.static_regions.len(),
        }
    }
}

fn check_layer(layer: &Layer) -> Result<()> {
    if !(layer.transform.scale > 0.0) || !layer.transform.scale.is_finite() {
        return Err(Error::Parameter(format!("layer scale must be positive, got {}", layer.transform.scale)));
    }
    if layer.gain.iter().any(|g| !g.is_finite() || *g < 0.0) {
        return Err(Error::Parameter(format!("invalid gain {:?}", layer.gain)));
    }
    Ok(())
}

/// Multiplies the DC colour coefficients channel-wise.
pub fn apply_gain(cloud: &mut SplatCloud, gain: [f32; 3]) {
    if gain == [1.0; 3] {
        return;
    }
    for sh in &mut cloud.sh {
        for c in 0..3 {
            sh[0][c] *= gain[c];
        }
    }
}

/// All layers transformed and tone-mapped, then the static regions.
pub fn composite_scene(scene: &Scene) -> Result<SplatCloud> {
    let mut parts = Vec::with_capacity(scene.layers.len() + scene.static_regions.len());
    for l in &scene.layers {
        let mut c = if l.transform.is_identity() { l.cloud.clone() } else { transform_cloud(&l.cloud, &l.transform)? };
        apply_gain(&mut c, l.gain);
        parts.push(c);
    }
    parts.extend(scene.static_regions.iter().cloned());
    let refs: Vec<&SplatCloud> = parts.iter().collect();
    Ok(SplatCloud::concat(&refs))
}

/// Writes the composite as a splat file; returns the point count. Exporting
/// an empty scene requires `allow_empty`.
pub fn export_scene(scene: &Scene, path: &Path, allow_empty: bool) -> Result<usize> {
    let bytes = export_scene_bytes(scene, allow_empty)?;
    write_atomic(path, &bytes.1)?;
    Ok(bytes.0)
}

pub fn export_scene_bytes(scene: &Scene, allow_empty: bool) -> Result<(usize, Vec<u8>)> {
    let cloud = composite_scene(scene)?;
    if cloud.is_empty() && !allow_empty {
        return Err(Error::Parameter("refusing to export an empty scene (pass the allow-empty flag)".into()));
    }
    Ok((cloud.len(), serialize_splat_file(&cloud)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse_net::NetworkConfig;
    use crate::synthetic::{torus_cloud, TorusSpec};
    use proptest::prelude::*;

    fn small_primitive() -> PrimitiveArchive {
        let cloud = torus_cloud(&TorusSpec { points: 3000, ..Default::default() }, 2);
        let (cloud, reducer, ex, cfg) =
            prepare_exemplar(&cloud, 16, 4, &VoxelizerConfig::default(), Some(Bounds::unit())).unwrap();
        let train = TrainConfig {
            net: NetworkConfig::with_depth(1),
            schedule: crate::gca_train::InfusionSchedule { iterations: 2, ..Default::default() },
            ..Default::default()
        };
        let mut p = build_primitive(cloud, reducer, ex, cfg, &train, "torus", &mut |_| {}).unwrap();
        p.model.randomize_heads(5);
        p
    }

    fn layer(id: &str, n: usize) -> Layer {
        let mut cloud = torus_cloud(&TorusSpec { points: n, ..Default::default() }, 0);
        cloud.raw_features = None;
        Layer {
            id: id.into(),
            primitive_id: "p".into(),
            seed: 0,
            cloud,
            grid: VoxelGrid::new(16, Bounds::unit()),
            conditioning: VoxelGrid::new(4, Bounds::unit()),
            transform: SimilarityTransform::identity(),
            gain: [1.0; 3],
        }
    }

    #[test]
    fn archive_round_trip_generates_identically() {
        let p = small_primitive();
        p.validate().unwrap();
        let bytes = p.to_bytes().unwrap();
        let q = PrimitiveArchive::from_bytes(&bytes).unwrap();
        assert_eq!(q.model, p.model);
        assert_eq!(q.target, p.target);
        assert_eq!(q.coarse, p.coarse);
        assert_eq!(q.reducer, p.reducer);
        let opts = GenerateOptions::default();
        let a = generate_layer(&p, "a", &p.coarse, 3, &opts, &mut |_, _| {}).unwrap();
        let b = generate_layer(&q, "a", &q.coarse, 3, &opts, &mut |_, _| {}).unwrap();
        assert_eq!(a, b);
        assert!(!a.grid.is_empty());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(PrimitiveArchive::from_bytes(&bad), Err(Error::Format(_))));
        assert!(PrimitiveArchive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn archive_file_save_load() {
        let p = small_primitive();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("torus.sgpa");
        p.save(&path).unwrap();
        assert_eq!(PrimitiveArchive::load(&path).unwrap(), p);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn generate_rejects_empty_and_mismatched() {
        let p = small_primitive();
        let empty = VoxelGrid::new(4, Bounds::unit());
        let e = generate_layer(&p, "a", &empty, 0, &GenerateOptions::default(), &mut |_, _| {}).unwrap_err();
        assert!(e.to_string().contains("empty conditioning"));
        let wrong = VoxelGrid::from_coords(8, Bounds::unit(), [[1, 1, 1]]).unwrap();
        assert!(generate_layer(&p, "a", &wrong, 0, &GenerateOptions::default(), &mut |_, _| {}).is_err());
    }

    #[test]
    fn brushes() {
        let p = small_primitive();
        let b = extract_brush(&p.coarse, "all").unwrap();
        let lo = p.coarse.cells.keys().fold([i32::MAX; 3], |m, c| [m[0].min(c[0]), m[1].min(c[1]), m[2].min(c[2])]);
        let (g, rep) =
            assemble_conditioning(4, Bounds::unit(), &[ConditioningEdit::Stamp { brush: b.clone(), offset: lo }]);
        assert!(rep.rejected.is_empty());
        assert_eq!(g.occupancy(), p.coarse.occupancy());
        assert_eq!(extract_brush(&g, "all").unwrap(), b);
        let one = VoxelGrid::from_coords(4, Bounds::unit(), [[2, 3, 1]]).unwrap();
        let b1 = extract_brush(&one, "dot").unwrap();
        assert_eq!(b1.cells.iter().copied().collect::<Vec<_>>(), vec![[0, 0, 0]]);
        assert_eq!(b1.size, [1, 1, 1]);
        assert!(extract_brush(&VoxelGrid::new(4, Bounds::unit()), "x").is_err());
    }

    #[test]
    fn edits() {
        let (g, _) = assemble_conditioning(
            8,
            Bounds::unit(),
            &[ConditioningEdit::Add { cell: [1, 1, 1] }, ConditioningEdit::Remove { cell: [1, 1, 1] }],
        );
        assert!(g.is_empty());
        let brush = Brush { name: "b".into(), size: [2, 1, 1], cells: [[0, 0, 0], [1, 0, 0]].into() };
        let (g, rep) = assemble_conditioning(
            8,
            Bounds::unit(),
            &[
                ConditioningEdit::Stamp { brush: brush.clone(), offset: [0, 0, 0] },
                ConditioningEdit::Stamp { brush: brush.clone(), offset: [4, 4, 4] },
                ConditioningEdit::Stamp { brush, offset: [7, 0, 0] },
                ConditioningEdit::Add { cell: [8, 0, 0] },
            ],
        );
        assert_eq!(g.coords(), vec![[0, 0, 0], [1, 0, 0], [4, 4, 4], [5, 4, 4]]);
        assert_eq!(rep.rejected.iter().map(|r| r.0).collect::<Vec<_>>(), vec![2, 3]);
    }

    #[test]
    fn mesh_edits_compose() {
        let tri: Triangle = [[0.1, 0.1, 0.5], [0.9, 0.1, 0.5], [0.1, 0.9, 0.5]];
        let mesh = ConditioningEdit::Mesh { triangles: vec![tri] };
        let adds = vec![ConditioningEdit::Add { cell: [7, 7, 7] }, ConditioningEdit::Add { cell: [0, 7, 0] }];
        let (m, _) = assemble_conditioning(8, Bounds::unit(), std::slice::from_ref(&mesh));
        let (a, _) = assemble_conditioning(8, Bounds::unit(), &adds);
        let mut all = vec![mesh];
        all.extend(adds);
        let (g, _) = assemble_conditioning(8, Bounds::unit(), &all);
        let union: BTreeSet<Coord> = m.occupancy().union(&a.occupancy()).copied().collect();
        assert_eq!(g.occupancy(), union);
        assert!(!m.is_empty());
    }

    #[test]
    fn edit_log_json_round_trip() {
        let edits = vec![
            ConditioningEdit::Add { cell: [1, 2, 3] },
            ConditioningEdit::Stamp {
                brush: Brush { name: "b".into(), size: [1, 1, 1], cells: [[0, 0, 0]].into() },
                offset: [2, 2, 2],
            },
        ];
        let s = serde_json::to_string(&edits).unwrap();
        assert!(s.contains("\"op\":\"add\""));
        let back: Vec<ConditioningEdit> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, edits);
    }

    #[test]
    fn compositing() {
        let mut scene = Scene::default();
        scene.add_layer(layer("a", 100)).unwrap();
        assert_eq!(composite_scene(&scene).unwrap(), scene.layers[0].cloud);
        scene.duplicate_layer("a", "b").unwrap();
        scene.update_layer("b", SimilarityTransform::translation([1.0, 0.0, 0.0]), [2.0, 1.0, 1.0]).unwrap();
        let c = composite_scene(&scene).unwrap();
        assert_eq!(c.len(), 200);
        let src = &scene.layers[0].cloud;
        for i in 0..100 {
            assert_eq!(c.sh[100 + i][0][0], 2.0 * src.sh[i][0][0]);
            assert_eq!(c.sh[100 + i][0][1], src.sh[i][0][1]);
            assert_eq!(&c.sh[100 + i][1..], &src.sh[i][1..]);
            assert!((c.positions[100 + i][0] - src.positions[i][0] - 1.0).abs() < 1e-6);
        }
        assert!(scene.add_layer(layer("a", 1)).is_err());
        let bad = SimilarityTransform { scale: 0.0, ..SimilarityTransform::identity() };
        assert!(scene.update_layer("a", bad, [1.0; 3]).is_err());
        assert_eq!(scene.describe().layers.len(), 2);
    }

    #[test]
    fn export() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.ply");
        let empty = Scene::default();
        assert!(export_scene(&empty, &path, false).is_err());
        assert!(!path.exists());
        assert_eq!(export_scene(&empty, &path, true).unwrap(), 0);
        let mut scene = Scene::default();
        scene.add_layer(layer("a", 100)).unwrap();
        scene.add_layer(layer("b", 100)).unwrap();
        assert_eq!(export_scene(&scene, &path, false).unwrap(), 200);
        let back = parse_splat_file(&std::fs::read(&path).unwrap()).unwrap();
        let comp = composite_scene(&scene).unwrap();
        assert_eq!(back.positions, comp.positions);
        assert_eq!(back.sh, comp.sh);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn replay_is_a_fold(ops in prop::collection::vec((0u8..3, 0i32..9, 0i32..9, 0i32..9), 0..60)) {
            let brush = Brush { name: "b".into(), size: [2, 2, 1], cells: [[0, 0, 0], [1, 1, 0]].into() };
            let edits: Vec<ConditioningEdit> = ops
                .iter()
                .map(|&(k, x, y, z)| match k {
                    0 => ConditioningEdit::Add { cell: [x, y, z] },
                    1 => ConditioningEdit::Remove { cell: [x, y, z] },
                    _ => ConditioningEdit::Stamp { brush: brush.clone(), offset: [x, y, z] },
                })
                .collect();
            let (g, _) = assemble_conditioning(8, Bounds::unit(), &edits);
            let mut live = VoxelGrid::new(8, Bounds::unit());
            for e in &edits {
                let _ = apply_edit(&mut live, e);
            }
            prop_assert_eq!(&g, &live);
            let json = g.to_json();
            prop_assert_eq!(VoxelGrid::from_json(&json).unwrap(), g);
        }

        #[test]
        fn compositing_permutation_invariant(swap in any::<bool>()) {
            let mut s = Scene::default();
            s.add_layer(layer("a", 30)).unwrap();
            let mut b = layer("b", 20);
            b.transform = SimilarityTransform::translation([0.5, 0.0, 0.0]);
            s.add_layer(b).unwrap();
            let c1 = composite_scene(&s).unwrap();
            if swap { s.layers.reverse(); }
            let c2 = composite_scene(&s).unwrap();
            let key = |c: &SplatCloud| { let mut v: Vec<[u32; 3]> = c.positions.iter().map(|p| p.map(f32::to_bits)).collect(); v.sort(); v };
            prop_assert_eq!(key(&c1), key(&c2));
        }
    }
}
