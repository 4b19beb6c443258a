//! Operations shared by the CLI and the HTTP service, so both produce the
//! same artifacts for the same inputs and seeds.

use serde::{Deserialize, Serialize};

use genprim::authoring::{build_primitive, generate_layer, prepare_exemplar, GenerateOptions, Layer, PrimitiveArchive};
use genprim::gca::{GcaState, SamplerConfig};
use genprim::gca_train::{InfusionSchedule, TrainConfig, TrainProgress};
use genprim::patch_consistency::ConsistencyConfig;
use genprim::sparse_net::{AdamWConfig, NetworkConfig};
use genprim::splat_io::{parse_feature_sidecar, parse_splat_file, serialize_splat_file, SplatCloud};
use genprim::voxelizer::{VoxelGrid, VoxelizerConfig};

use crate::ServiceError;

/// Parses a splat file and attaches an optional raw-feature sidecar.
pub fn load_cloud(splat: &[u8], features: Option<&[u8]>) -> Result<SplatCloud, ServiceError> {
    let mut cloud = parse_splat_file(splat)?;
    if let Some(f) = features {
        let m = parse_feature_sidecar(f)?;
        if m.rows != cloud.len() {
            return Err(ServiceError::Invalid(format!(
                "feature sidecar has {} rows for {} points",
                m.rows,
                cloud.len()
            )));
        }
        cloud.raw_features = Some(m);
    }
    Ok(cloud)
}

/// Training parameters; defaults follow the reference hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRequest {
    pub name: String,
    pub resolution: u32,
    pub coarse: u32,
    pub eta_thres: f64,
    pub iters: usize,
    pub t_train: usize,
    pub alpha0: f64,
    #[serde(rename = "alphaT")]
    pub alpha_t: f64,
    pub lambda_z: f64,
    pub lr: f64,
    pub wd: f64,
    pub depth: usize,
    pub radius: i32,
    pub seed: u64,
    pub log_every: usize,
    pub lr_decay_start: Option<usize>,
}

impl Default for TrainRequest {
    fn default() -> Self {
        let s = InfusionSchedule::default();
        let o = AdamWConfig::default();
        Self {
            name: "primitive".into(),
            resolution: 64,
            coarse: 16,
            eta_thres: VoxelizerConfig::default().eta_thres,
            iters: s.iterations,
            t_train: s.t_train,
            alpha0: s.alpha0,
            alpha_t: s.alpha_t,
            lambda_z: s.lambda_z,
            lr: o.lr,
            wd: o.weight_decay,
            depth: NetworkConfig::default().depth,
            radius: 2,
            seed: 0,
            log_every: 100,
            lr_decay_start: None,
        }
    }
}

impl TrainRequest {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            net: NetworkConfig::with_depth(self.depth),
            schedule: InfusionSchedule {
                alpha0: self.alpha0,
                alpha_t: self.alpha_t,
                t_train: self.t_train,
                lambda_z: self.lambda_z,
                iterations: self.iters,
            },
            optimizer: AdamWConfig { lr: self.lr, weight_decay: self.wd, ..Default::default() },
            radius: self.radius,
            seed: self.seed,
            log_every: self.log_every,
            lr_decay_start: self.lr_decay_start,
            ..Default::default()
        }
    }
}

pub fn train_archive(
    cloud: &SplatCloud,
    req: &TrainRequest,
    progress: &mut dyn FnMut(&TrainProgress),
) -> Result<PrimitiveArchive, ServiceError> {
    let vox = VoxelizerConfig { eta_thres: req.eta_thres, allow_any_resolution: true };
    let (cloud, reducer, exemplar, mut cfg) = prepare_exemplar(cloud, req.resolution, req.coarse, &vox, None)?;
    cfg.sampler.radius = req.radius;
    let train = req.train_config();
    build_primitive(cloud, reducer, exemplar, cfg, &train, &req.name, progress)
        .map_err(|a| ServiceError::Core(a.into()))
}

/// Sampling and refinement parameters; unset fields use the primitive's.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateRequest {
    pub t_infer: Option<usize>,
    pub mode_seeking: Option<bool>,
    pub consistency: Option<bool>,
    pub l: Option<usize>,
    pub consistency_iters: Option<usize>,
    pub w: Option<f64>,
    pub beta: Option<f64>,
    pub lambda_patch: Option<i32>,
}

impl GenerateRequest {
    pub fn options(&self, archive: &PrimitiveArchive) -> GenerateOptions {
        let base = archive.config;
        let sampler = SamplerConfig {
            t_infer: self.t_infer.unwrap_or(base.sampler.t_infer),
            mode_seeking: self.mode_seeking.unwrap_or(base.sampler.mode_seeking),
            ..base.sampler
        };
        let c = base.consistency;
        let consistency = ConsistencyConfig {
            l: self.l.unwrap_or(c.l),
            iterations: self.consistency_iters.unwrap_or(c.iterations),
            w: self.w.unwrap_or(c.w),
            beta: self.beta.unwrap_or(c.beta),
            lambda_patch: self.lambda_patch.unwrap_or(c.lambda_patch),
        };
        GenerateOptions {
            sampler: Some(sampler),
            consistency: Some(consistency),
            use_consistency: Some(self.consistency.unwrap_or(base.use_consistency)),
        }
    }

    /// Total number of sampler callbacks for progress reporting.
    pub fn steps(&self, archive: &PrimitiveArchive) -> usize {
        let o = self.options(archive).sampler.unwrap();
        o.t_infer + 1 + usize::from(o.mode_seeking)
    }
}

pub struct GenerateOutput {
    pub layer: Layer,
    /// VoxelGrid JSON of the generated grid (features, no payload).
    pub grid_json: String,
    pub splat: Vec<u8>,
}

pub fn generate(
    archive: &PrimitiveArchive,
    primitive_id: &str,
    conditioning: &VoxelGrid,
    seed: u64,
    req: &GenerateRequest,
    on_step: &mut dyn FnMut(usize, &GcaState),
) -> Result<GenerateOutput, ServiceError> {
    let layer = generate_layer(archive, primitive_id, conditioning, seed, &req.options(archive), on_step)?;
    let grid_json = layer.grid.to_json();
    let splat = serialize_splat_file(&layer.cloud)?;
    Ok(GenerateOutput { layer, grid_json, splat })
}
