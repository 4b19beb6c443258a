//! `genprim` command line.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use genprim::authoring::{export_scene, write_atomic, PrimitiveArchive};
use genprim::feature_field::{kmeans_quantize, select_by_clusters, FeatureConfig, FeatureReducer};
use genprim::patch_consistency::{run_consistency, ConsistencyConfig};
use genprim::splat_io::{
    parse_feature_sidecar, serialize_feature_sidecar, serialize_splat_file, FeatureMatrix, SimilarityTransform,
};
use genprim::voxelizer::{default_bounds, VoxelGrid, VoxelizerConfig};

use crate::pipeline::{self, GenerateRequest, TrainRequest};
use crate::scene_file::{SceneFile, SceneFileLayer};
use crate::ServiceError;

#[derive(Debug, Parser)]
#[command(name = "genprim", version, about = "Generative sparse-voxel primitives for 3D Gaussian splat scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a splat file (plus optional feature sidecar) and write a project directory.
    Ingest(IngestArgs),
    /// Cluster reduced features with k-means and write selection masks.
    Select(SelectArgs),
    /// Build the featured surface-voxel grid and its coarse grid.
    Voxelize(VoxelizeArgs),
    /// Train a primitive and write its archive.
    Train(TrainArgs),
    /// Sample a layer from a primitive under a conditioning grid.
    Generate(GenerateArgs),
    /// Run patch consistency on a generated grid against an exemplar grid.
    Consistency(ConsistencyArgs),
    /// Add, update, duplicate or remove layers of a scene file.
    Compose(ComposeArgs),
    /// Composite a scene file into a single splat file.
    Export(ExportArgs),
    /// Run the HTTP/JSON service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Splat file (binary little-endian PLY).
    #[arg(long)]
    pub splat: PathBuf,
    /// Per-point raw feature sidecar.
    #[arg(long)]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Project directory to create.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Project directory written by `ingest`.
    #[arg(long)]
    pub project: PathBuf,
    /// Number of clusters.
    #[arg(long, default_value_t = 8)]
    pub clusters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Clusters to keep (comma separated) when writing a subset.
    #[arg(long, value_delimiter = ',')]
    pub keep: Vec<usize>,
    /// Mask JSON output.
    #[arg(long)]
    pub out: PathBuf,
    /// Splat subset of the kept clusters.
    #[arg(long)]
    pub splat_out: Option<PathBuf>,
    /// Raw feature sidecar of the kept clusters.
    #[arg(long)]
    pub features_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VoxelizeArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value_t = 64)]
    pub resolution: u32,
    #[arg(long, default_value_t = 16)]
    pub coarse: u32,
    #[arg(long = "eta-thres", default_value_t = 0.1)]
    pub eta_thres: f64,
    /// Target grid JSON (features and Gaussian indices).
    #[arg(long)]
    pub out: PathBuf,
    /// Coarse grid JSON.
    #[arg(long)]
    pub coarse_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Archive output.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "primitive")]
    pub name: String,
    #[arg(long, default_value_t = 64)]
    pub resolution: u32,
    #[arg(long, default_value_t = 16)]
    pub coarse: u32,
    #[arg(long = "eta-thres", default_value_t = 0.1)]
    pub eta_thres: f64,
    #[arg(long, default_value_t = 10000)]
    pub iters: usize,
    #[arg(long = "T-train", default_value_t = 5)]
    pub t_train: usize,
    #[arg(long, default_value_t = 0.1)]
    pub alpha0: f64,
    #[arg(long = "alphaT", default_value_t = 0.25)]
    pub alpha_t: f64,
    #[arg(long = "lambda-z", default_value_t = 0.01)]
    pub lambda_z: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub wd: f64,
    /// U-Net depth (1 or 2 for the light variants).
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    /// Neighbourhood radius.
    #[arg(long, default_value_t = 2)]
    pub radius: i32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "log-every", default_value_t = 100)]
    pub log_every: usize,
    /// Decay the learning rate linearly to zero from this iteration on.
    #[arg(long = "lr-decay-start")]
    pub lr_decay_start: Option<usize>,
    /// JSON-lines training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

impl TrainArgs {
    fn request(&self) -> TrainRequest {
        TrainRequest {
            name: self.name.clone(),
            resolution: self.resolution,
            coarse: self.coarse,
            eta_thres: self.eta_thres,
            iters: self.iters,
            t_train: self.t_train,
            alpha0: self.alpha0,
            alpha_t: self.alpha_t,
            lambda_z: self.lambda_z,
            lr: self.lr,
            wd: self.wd,
            depth: self.depth,
            radius: self.radius,
            seed: self.seed,
            log_every: self.log_every,
            lr_decay_start: self.lr_decay_start,
        }
    }
}

#[derive(Debug, Args)]
pub struct PatchArgs {
    #[arg(long, default_value_t = 5)]
    pub l: usize,
    #[arg(long, default_value_t = 0.5)]
    pub w: f64,
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    #[arg(long = "lambda-patch", default_value_t = 2)]
    pub lambda_patch: i32,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Primitive archive.
    #[arg(long)]
    pub primitive: PathBuf,
    /// Conditioning VoxelGrid JSON at the primitive's coarse resolution.
    #[arg(long, required_unless_present = "own_conditioning")]
    pub conditioning: Option<PathBuf>,
    /// Condition on the primitive's own exemplar coarse grid.
    #[arg(long)]
    pub own_conditioning: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "T-infer", default_value_t = 7)]
    pub t_infer: usize,
    /// Skip the final mode-seeking step.
    #[arg(long)]
    pub no_mode_seeking: bool,
    /// Skip patch consistency refinement.
    #[arg(long)]
    pub no_consistency: bool,
    #[arg(long = "consistency-iters", default_value_t = 7)]
    pub consistency_iters: usize,
    #[command(flatten)]
    pub patch: PatchArgs,
    /// Generated VoxelGrid JSON.
    #[arg(long)]
    pub out_grid: PathBuf,
    /// Generated splat file.
    #[arg(long)]
    pub out_splat: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConsistencyArgs {
    /// Generated VoxelGrid JSON with features.
    #[arg(long)]
    pub grid: PathBuf,
    /// Exemplar VoxelGrid JSON with features.
    #[arg(long, required_unless_present = "primitive")]
    pub exemplar: Option<PathBuf>,
    /// Take the exemplar from a primitive archive.
    #[arg(long)]
    pub primitive: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    pub iterations: usize,
    #[command(flatten)]
    pub patch: PatchArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ComposeArgs {
    /// Scene file (created when missing).
    #[arg(long)]
    pub scene: PathBuf,
    /// Layer id to add, update, duplicate into or remove.
    #[arg(long)]
    pub layer: Option<String>,
    /// Splat file of a new layer.
    #[arg(long)]
    pub splat: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub translate: Option<Vec<f64>>,
    /// Axis and angle in degrees: `ax,ay,az,deg`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub rotate: Option<Vec<f64>>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub gain: Option<Vec<f32>>,
    /// Copy an existing layer into `--layer`.
    #[arg(long)]
    pub duplicate_from: Option<String>,
    #[arg(long)]
    pub remove: bool,
    /// Append a static splat region.
    #[arg(long = "static")]
    pub static_region: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Allow writing a 0-point file.
    #[arg(long)]
    pub allow_empty: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Directory where primitive archives are persisted.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, ServiceError> {
    std::fs::read(path).map_err(|e| ServiceError::Invalid(format!("{}: {e}", path.display())))
}

fn load_input(input: &InputArgs) -> Result<genprim::splat_io::SplatCloud, ServiceError> {
    let splat = read(&input.splat)?;
    let features = input.features.as_deref().map(read).transpose()?;
    pipeline::load_cloud(&splat, features.as_deref())
}

fn read_grid(path: &Path) -> Result<VoxelGrid, ServiceError> {
    let text = String::from_utf8(read(path)?)
        .map_err(|_| ServiceError::Invalid(format!("{} is not UTF-8", path.display())))?;
    let value: genprim::voxelizer::VoxelGridJson = serde_json::from_str(&text)
        .map_err(|e| ServiceError::Invalid(format!("{}: invalid grid JSON: {e}", path.display())))?;
    Ok(VoxelGrid::from_json_value(value)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ServiceError> {
    write_atomic(path, &serde_json::to_vec(value)?)?;
    Ok(())
}

#[derive(Serialize, serde::Deserialize)]
pub struct ProjectManifest {
    pub points: usize,
    pub sh_degree: u8,
    pub bounds: Option<genprim::voxelizer::Bounds>,
    pub raw_feature_dim: Option<usize>,
    pub semantic_substituted: bool,
    pub reducer: FeatureReducer,
}

#[derive(Serialize)]
struct MaskFile {
    clusters: usize,
    seed: u64,
    labels: Vec<u32>,
    sizes: Vec<usize>,
    inertia: f64,
    kept: Vec<usize>,
    selected: usize,
}

fn execute(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), ServiceError> {
    match cmd {
        Command::Ingest(a) => {
            let cloud = load_input(&a.input)?;
            cloud.validate()?;
            let reducer = FeatureReducer::fit(&cloud, FeatureConfig::default())?;
            let reduced = reducer.reduce(&cloud)?;
            std::fs::create_dir_all(&a.out)?;
            write_atomic(&a.out.join("cloud.ply"), &read(&a.input.splat)?)?;
            if let Some(f) = &a.input.features {
                write_atomic(&a.out.join("features.sgpf"), &read(f)?)?;
            }
            let rows: Vec<Vec<f32>> = reduced.iter().map(|f| f.to_vec()).collect();
            let m = FeatureMatrix::from_rows(&rows)?;
            write_atomic(&a.out.join("reduced.sgpf"), &serialize_feature_sidecar(&m))?;
            let manifest = ProjectManifest {
                points: cloud.len(),
                sh_degree: cloud.sh_degree,
                bounds: default_bounds(&cloud),
                raw_feature_dim: cloud.raw_features.as_ref().map(|f| f.dim),
                semantic_substituted: reducer.semantic_substituted,
                reducer,
            };
            write_json(&a.out.join("project.json"), &manifest)?;
            writeln!(out, "ingested {} points into {}", manifest.points, a.out.display())?;
        }
        Command::Select(a) => {
            let reduced = parse_feature_sidecar(&read(&a.project.join("reduced.sgpf"))?)?;
            let data: Vec<f64> = reduced.data.iter().map(|&v| v as f64).collect();
            let km = kmeans_quantize(&data, reduced.dim, a.clusters, a.seed)?;
            let mut sizes = vec![0usize; a.clusters];
            for &l in &km.labels {
                sizes[l as usize] += 1;
            }
            let chosen: Vec<u32> = a.keep.iter().map(|&k| k as u32).collect();
            let mask = select_by_clusters(&km.labels, a.clusters, &chosen)?;
            let idx = mask.indices();
            if a.splat_out.is_some() || a.features_out.is_some() {
                let feats = a.project.join("features.sgpf");
                let raw = if feats.exists() { Some(read(&feats)?) } else { None };
                let cloud = pipeline::load_cloud(&read(&a.project.join("cloud.ply"))?, raw.as_deref())?;
                let subset = cloud.select(&idx);
                if let Some(p) = &a.splat_out {
                    write_atomic(p, &serialize_splat_file(&subset)?)?;
                }
                if let (Some(p), Some(f)) = (&a.features_out, &subset.raw_features) {
                    write_atomic(p, &serialize_feature_sidecar(f))?;
                }
            }
            let file = MaskFile {
                clusters: a.clusters,
                seed: a.seed,
                labels: km.labels.clone(),
                sizes,
                inertia: km.inertia(),
                kept: a.keep.clone(),
                selected: idx.len(),
            };
            write_json(&a.out, &file)?;
            writeln!(out, "{} clusters, {} points selected", a.clusters, idx.len())?;
        }
        Command::Voxelize(a) => {
            let cloud = load_input(&a.input)?;
            let vox = VoxelizerConfig { eta_thres: a.eta_thres, allow_any_resolution: true };
            let (_, _, ex, _) = genprim::authoring::prepare_exemplar(&cloud, a.resolution, a.coarse, &vox, None)?;
            write_json(&a.out, &ex.target.to_json_value(true))?;
            if let Some(p) = &a.coarse_out {
                write_json(p, &ex.coarse.to_json_value(false))?;
            }
            writeln!(
                out,
                "{} surface voxels at {}³, {} at {}³",
                ex.target.len(),
                a.resolution,
                ex.coarse.len(),
                a.coarse
            )?;
        }
        Command::Train(a) => {
            let cloud = load_input(&a.input)?;
            let req = a.request();
            let mut log = match &a.log {
                Some(p) => Some(std::fs::File::create(p)?),
                None => None,
            };
            let archive = pipeline::train_archive(&cloud, &req, &mut |p| {
                if let Some(r) = p.record {
                    let line = serde_json::to_string(r).unwrap_or_default();
                    let _ = writeln!(err, "{line}");
                    if let Some(f) = log.as_mut() {
                        let _ = writeln!(f, "{line}");
                    }
                }
            })?;
            archive.save(&a.out)?;
            writeln!(
                out,
                "trained {} for {} iterations: {} target voxels, {} Gaussians",
                req.name,
                req.iters,
                archive.target.len(),
                archive.cloud.len()
            )?;
        }
        Command::Generate(a) => {
            let archive = PrimitiveArchive::load(&a.primitive)?;
            let conditioning = match &a.conditioning {
                Some(p) if !a.own_conditioning => read_grid(p)?,
                _ => archive.coarse.clone(),
            };
            let req = GenerateRequest {
                t_infer: Some(a.t_infer),
                mode_seeking: Some(!a.no_mode_seeking),
                consistency: Some(!a.no_consistency),
                l: Some(a.patch.l),
                consistency_iters: Some(a.consistency_iters),
                w: Some(a.patch.w),
                beta: Some(a.patch.beta),
                lambda_patch: Some(a.patch.lambda_patch),
            };
            let id = a.primitive.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let g = pipeline::generate(&archive, &id, &conditioning, a.seed, &req, &mut |_, _| {})?;
            write_atomic(&a.out_grid, g.grid_json.as_bytes())?;
            write_atomic(&a.out_splat, &g.splat)?;
            writeln!(
                out,
                "generated {} voxels, {} Gaussians (seed {})",
                g.layer.grid.len(),
                g.layer.cloud.len(),
                a.seed
            )?;
        }
        Command::Consistency(a) => {
            let grid = read_grid(&a.grid)?;
            let exemplar = match (&a.primitive, &a.exemplar) {
                (Some(p), _) => PrimitiveArchive::load(p)?.target,
                (None, Some(e)) => read_grid(e)?,
                (None, None) => unreachable!("clap requires one of them"),
            };
            let cfg = ConsistencyConfig {
                l: a.patch.l,
                iterations: a.iterations,
                w: a.patch.w,
                beta: a.patch.beta,
                lambda_patch: a.patch.lambda_patch,
            };
            let refined = run_consistency(&grid, &exemplar, &cfg)?;
            write_atomic(&a.out, refined.to_json().as_bytes())?;
            writeln!(out, "{} -> {} voxels", grid.len(), refined.len())?;
        }
        Command::Compose(a) => compose(a, out)?,
        Command::Export(a) => {
            let file = SceneFile::load(&a.scene)?;
            let base = a.scene.parent().unwrap_or(Path::new("."));
            let scene = file.to_scene(base)?;
            let n = export_scene(&scene, &a.out, a.allow_empty)?;
            writeln!(out, "exported {n} Gaussians to {}", a.out.display())?;
        }
        Command::Serve(a) => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::server::serve(&a.addr, a.data))?;
        }
    }
    Ok(())
}

fn transform_from(a: &ComposeArgs, base: SimilarityTransform) -> Result<SimilarityTransform, ServiceError> {
    let mut t = base;
    if let Some(r) = &a.rotate {
        let [x, y, z, deg] = r[..] else {
            return Err(ServiceError::Invalid("--rotate expects ax,ay,az,deg".into()));
        };
        let rot = SimilarityTransform::from_axis_angle([x, y, z], deg.to_radians());
        t.rotation = rot.rotation;
    }
    if let Some(v) = &a.translate {
        let [x, y, z] = v[..] else {
            return Err(ServiceError::Invalid("--translate expects x,y,z".into()));
        };
        t.translation = [x, y, z];
    }
    if let Some(s) = a.scale {
        t.scale = s;
    }
    Ok(t)
}

fn path_string(p: &Path) -> Result<String, ServiceError> {
    Ok(std::path::absolute(p)?.to_string_lossy().into_owned())
}

fn compose(a: ComposeArgs, out: &mut dyn Write) -> Result<(), ServiceError> {
    let mut file = SceneFile::load_or_default(&a.scene)?;
    if let Some(s) = &a.static_region {
        file.static_regions.push(path_string(s)?);
    }
    if let Some(id) = &a.layer {
        let gain = match &a.gain {
            Some(g) => {
                let [r, gg, b] = g[..] else {
                    return Err(ServiceError::Invalid("--gain expects r,g,b".into()));
                };
                Some([r, gg, b])
            }
            None => None,
        };
        if a.remove {
            let before = file.layers.len();
            file.layers.retain(|l| &l.id != id);
            if file.layers.len() == before {
                return Err(ServiceError::Invalid(format!("unknown layer {id}")));
            }
        } else if let Some(src) = &a.duplicate_from {
            if file.layers.iter().any(|l| &l.id == id) {
                return Err(ServiceError::Invalid(format!("duplicate layer id {id}")));
            }
            let mut copy = file
                .layers
                .iter()
                .find(|l| &l.id == src)
                .cloned()
                .ok_or_else(|| ServiceError::Invalid(format!("unknown layer {src}")))?;
            copy.id = id.clone();
            copy.transform = transform_from(&a, copy.transform)?;
            if let Some(g) = gain {
                copy.gain = g;
            }
            file.layers.push(copy);
        } else if let Some(layer) = file.layer_mut(id) {
            layer.transform = transform_from(&a, layer.transform)?;
            if let Some(g) = gain {
                layer.gain = g;
            }
            if let Some(s) = &a.splat {
                layer.splat = path_string(s)?;
            }
        } else {
            let splat =
                a.splat.as_ref().ok_or_else(|| ServiceError::Invalid(format!("new layer {id} needs --splat")))?;
            file.layers.push(SceneFileLayer {
                id: id.clone(),
                splat: path_string(splat)?,
                primitive: String::new(),
                seed: 0,
                transform: transform_from(&a, SimilarityTransform::identity())?,
                gain: gain.unwrap_or([1.0; 3]),
            });
        }
        if let Some(l) = file.layers.iter().find(|l| &l.id == id) {
            if !(l.transform.scale > 0.0) {
                return Err(ServiceError::Invalid("layer scale must be positive".into()));
            }
        }
    }
    file.save(&a.scene)?;
    writeln!(out, "scene has {} layers and {} static regions", file.layers.len(), file.static_regions.len())?;
    Ok(())
}
