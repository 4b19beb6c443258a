//! HTTP/JSON service. Work runs on blocking threads behind one FIFO queue per
//! primitive; job state lives in a shared registry that handlers poll.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::mpsc;

use genprim::authoring::{export_scene_bytes, Layer, PrimitiveArchive, Scene};
use genprim::splat_io::{SimilarityTransform, SplatCloud};
use genprim::voxelizer::{Bounds, VoxelGrid, VoxelGridJson};

use crate::jobs::{JobEntry, JobKind, JobOutput, JobRecord, JobStatus, StepState};
use crate::pipeline::{self, GenerateRequest, TrainRequest};
use crate::ServiceError;

const PLY_TYPE: &str = "application/x-ply";
const ARCHIVE_TYPE: &str = "application/octet-stream";
/// Uploads carry whole splat files as base64.
const BODY_LIMIT: usize = 1 << 30;

type Task = Box<dyn FnOnce() + Send + 'static>;

struct PrimitiveEntry {
    name: String,
    archive: Option<Arc<PrimitiveArchive>>,
    /// Cloud the primitive was trained from, kept for retraining.
    input: Option<Arc<SplatCloud>>,
    /// Queued or running training job.
    training: Option<String>,
    queue: mpsc::UnboundedSender<Task>,
}

#[derive(Default)]
struct Registry {
    primitives: BTreeMap<String, PrimitiveEntry>,
    jobs: BTreeMap<String, JobEntry>,
    scenes: BTreeMap<String, Scene>,
    next_primitive: u64,
    next_job: u64,
    next_scene: u64,
}

/// Shared service state.
pub struct AppState {
    registry: Mutex<Registry>,
    data: Option<PathBuf>,
    seeds: AtomicU64,
}

pub type SharedState = Arc<AppState>;

impl AppState {
    /// Loads every `*.sgpa` archive in `data` (id = file stem).
    pub fn new(data: Option<PathBuf>) -> Result<SharedState, ServiceError> {
        let state = Arc::new(AppState { registry: Mutex::new(Registry::default()), data, seeds: AtomicU64::new(1) });
        if let Some(dir) = &state.data {
            std::fs::create_dir_all(dir)?;
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "sgpa"))
                .collect();
            paths.sort();
            let mut reg = state.lock();
            for p in paths {
                let Some(id) = p.file_stem().map(|s| s.to_string_lossy().into_owned()) else { continue };
                let archive = PrimitiveArchive::load(&p)?;
                let name = archive.metadata.name.clone();
                let entry = PrimitiveEntry {
                    name,
                    archive: Some(Arc::new(archive)),
                    input: None,
                    training: None,
                    queue: spawn_worker(),
                };
                reg.primitives.insert(id, entry);
            }
        }
        Ok(state)
    }

    fn lock(&self) -> MutexGuard<'_, Registry> {
        self.registry.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn next_seed(&self) -> u64 {
        self.seeds.fetch_add(1, Ordering::Relaxed)
    }

    fn persist(&self, id: &str, archive: &PrimitiveArchive) -> Result<(), ServiceError> {
        if let Some(dir) = &self.data {
            archive.save(&dir.join(format!("{id}.sgpa")))?;
        }
        Ok(())
    }
}

fn spawn_worker() -> mpsc::UnboundedSender<Task> {
    let (tx, mut rx) = mpsc::unbounded_channel::<Task>();
    tokio::spawn(async move {
        while let Some(task) = rx.recv().await {
            let _ = tokio::task::spawn_blocking(task).await;
        }
    });
    tx
}

/// Error response carrying a status and a JSON `{error}` body.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {what} {id}"))
    }
    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match &e {
            ServiceError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            ServiceError::Core(genprim::Error::Io(_)) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        Self::new(status, e.to_string())
    }
}

impl From<genprim::Error> for ApiError {
    fn from(e: genprim::Error) -> Self {
        ServiceError::Core(e).into()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Parses a JSON body; an empty body reads as `{}`.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let bytes: &[u8] = if body.iter().all(u8::is_ascii_whitespace) { b"{}" } else { body };
    serde_json::from_slice(bytes).map_err(|e| ApiError::bad_request(format!("invalid body: {e}")))
}

fn decode_b64(field: &str, text: &str) -> ApiResult<Vec<u8>> {
    B64.decode(text.trim()).map_err(|e| ApiError::bad_request(format!("{field}: invalid base64: {e}")))
}

fn binary(content_type: &'static str, bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, content_type)], bytes).into_response()
}

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/primitives", post(create_primitive).get(list_primitives))
        .route("/primitives/{id}", get(get_primitive).delete(delete_primitive))
        .route("/primitives/{id}/archive", get(get_archive))
        .route("/primitives/{id}/train", post(retrain_primitive))
        .route("/primitives/{id}/generate", post(generate))
        .route("/jobs", get(list_jobs))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/result", get(get_result))
        .route("/jobs/{id}/result/splat", get(get_result_splat))
        .route("/scenes", post(create_scene).get(list_scenes))
        .route("/scenes/{id}", get(get_scene).delete(delete_scene))
        .route("/scenes/{id}/layers", post(add_layer))
        .route("/scenes/{id}/layers/{layer}", get(get_layer).put(update_layer).patch(update_layer).delete(delete_layer))
        .route("/scenes/{id}/layers/{layer}/duplicate", post(duplicate_layer))
        .route("/scenes/{id}/static", post(add_static))
        .route("/scenes/{id}/export", post(export))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(addr: &str, data: Option<PathBuf>) -> Result<(), ServiceError> {
    let state = AppState::new(data)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

// ---------------------------------------------------------------- primitives

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CreatePrimitiveBody {
    /// Base64 splat file (PLY or .splat).
    splat: Option<String>,
    /// Base64 raw-feature sidecar.
    features: Option<String>,
    /// Base64 primitive archive; registers it without training.
    archive: Option<String>,
    train: Option<TrainRequest>,
}

#[derive(Serialize)]
struct PrimitiveSummary {
    id: String,
    name: String,
    trained: bool,
    training_job: Option<String>,
    target_resolution: Option<u32>,
    coarse_resolution: Option<u32>,
    bounds: Option<Bounds>,
    target_voxels: Option<usize>,
    gaussians: Option<usize>,
    iterations: Option<usize>,
}

fn summary(id: &str, p: &PrimitiveEntry) -> PrimitiveSummary {
    let a = p.archive.as_deref();
    PrimitiveSummary {
        id: id.to_string(),
        name: p.name.clone(),
        trained: a.is_some(),
        training_job: p.training.clone(),
        target_resolution: a.map(|a| a.config.target_resolution),
        coarse_resolution: a.map(|a| a.config.coarse_resolution),
        bounds: a.map(|a| a.config.bounds),
        target_voxels: a.map(|a| a.target.len()),
        gaussians: a.map(|a| a.cloud.len()),
        iterations: a.map(|a| a.metadata.iterations),
    }
}

fn input_cloud(body: &CreatePrimitiveBody) -> ApiResult<Option<SplatCloud>> {
    let Some(splat) = &body.splat else {
        if body.features.is_some() {
            return Err(ApiError::bad_request("features given without splat"));
        }
        return Ok(None);
    };
    let splat = decode_b64("splat", splat)?;
    let features = body.features.as_deref().map(|f| decode_b64("features", f)).transpose()?;
    Ok(Some(pipeline::load_cloud(&splat, features.as_deref())?))
}

async fn create_primitive(State(st): State<SharedState>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let body: CreatePrimitiveBody = parse_body(&body)?;
    if let Some(archive) = &body.archive {
        if body.splat.is_some() || body.train.is_some() {
            return Err(ApiError::bad_request("archive excludes splat and train"));
        }
        let archive = PrimitiveArchive::from_bytes(&decode_b64("archive", archive)?)?;
        let mut reg = st.lock();
        reg.next_primitive += 1;
        let id = format!("p{}", reg.next_primitive);
        st.persist(&id, &archive)?;
        let entry = PrimitiveEntry {
            name: archive.metadata.name.clone(),
            archive: Some(Arc::new(archive)),
            input: None,
            training: None,
            queue: spawn_worker(),
        };
        let s = summary(&id, &entry);
        reg.primitives.insert(id.clone(), entry);
        return Ok((StatusCode::CREATED, Json(json!({ "id": id, "primitive": s }))));
    }
    let cloud = input_cloud(&body)?.ok_or_else(|| ApiError::bad_request("need splat or archive"))?;
    let req = body.train.unwrap_or_default();
    validate_train(&req)?;
    let mut reg = st.lock();
    reg.next_primitive += 1;
    let id = format!("p{}", reg.next_primitive);
    reg.primitives.insert(
        id.clone(),
        PrimitiveEntry { name: req.name.clone(), archive: None, input: None, training: None, queue: spawn_worker() },
    );
    let job = enqueue_train(&st, &mut reg, &id, Arc::new(cloud), req)?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "id": id, "job": job }))))
}

async fn retrain_primitive(
    State(st): State<SharedState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let body: CreatePrimitiveBody = parse_body(&body)?;
    if body.archive.is_some() {
        return Err(ApiError::bad_request("archive is not accepted here"));
    }
    let cloud = input_cloud(&body)?;
    let mut reg = st.lock();
    let p = reg.primitives.get(&id).ok_or_else(|| ApiError::not_found("primitive", &id))?;
    if let Some(job) = &p.training {
        return Err(ApiError::conflict(format!("primitive {id} already has training job {job}")));
    }
    let cloud = match cloud {
        Some(c) => Arc::new(c),
        None => p.input.clone().ok_or_else(|| ApiError::bad_request("primitive has no stored input; send splat"))?,
    };
    let req = body.train.unwrap_or_else(|| TrainRequest { name: p.name.clone(), ..Default::default() });
    validate_train(&req)?;
    let job = enqueue_train(&st, &mut reg, &id, cloud, req)?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "id": id, "job": job }))))
}

fn validate_train(req: &TrainRequest) -> ApiResult<()> {
    let cfg = req.train_config();
    cfg.schedule.validate()?;
    if req.coarse == 0 || req.resolution <= req.coarse || req.resolution % req.coarse != 0 {
        return Err(ApiError::bad_request("resolution must be a multiple of coarse"));
    }
    Ok(())
}

fn new_job(reg: &mut Registry, kind: JobKind, primitive: &str, seed: Option<u64>) -> String {
    reg.next_job += 1;
    let id = format!("j{}", reg.next_job);
    reg.jobs.insert(id.clone(), JobEntry::new(JobRecord::new(id.clone(), kind, primitive.to_string(), seed)));
    id
}

fn with_job(st: &AppState, id: &str, f: impl FnOnce(&mut JobEntry)) {
    if let Some(j) = st.lock().jobs.get_mut(id) {
        f(j);
    }
}

fn enqueue_train(
    st: &SharedState,
    reg: &mut Registry,
    primitive: &str,
    cloud: Arc<SplatCloud>,
    req: TrainRequest,
) -> ApiResult<String> {
    let job = new_job(reg, JobKind::Train, primitive, Some(req.seed));
    let p = reg.primitives.get_mut(primitive).expect("primitive registered");
    p.training = Some(job.clone());
    p.input = Some(cloud.clone());
    let (st2, job2, pid) = (st.clone(), job.clone(), primitive.to_string());
    let task: Task = Box::new(move || {
        let st = st2;
        with_job(&st, &job2, |j| {
            j.record.start();
        });
        let result = pipeline::train_archive(&cloud, &req, &mut |p| {
            let frac = p.iteration as f64 / p.iterations.max(1) as f64;
            with_job(&st, &job2, |j| j.record.advance(frac.min(0.999)));
        });
        let outcome = result.and_then(|archive| {
            st.persist(&pid, &archive)?;
            Ok(archive)
        });
        let mut reg = st.lock();
        let outcome = match outcome {
            Ok(archive) => {
                if let Some(p) = reg.primitives.get_mut(&pid) {
                    p.archive = Some(Arc::new(archive));
                }
                Ok(())
            }
            Err(e) => Err(e.to_string()),
        };
        if let Some(p) = reg.primitives.get_mut(&pid) {
            if p.training.as_deref() == Some(job2.as_str()) {
                p.training = None;
            }
        }
        if let Some(j) = reg.jobs.get_mut(&job2) {
            if outcome.is_ok() {
                j.output = Some(JobOutput::Trained);
            }
            j.record.finish(outcome);
        }
    });
    p.queue.send(task).map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "worker stopped"))?;
    Ok(job)
}

async fn list_primitives(State(st): State<SharedState>) -> Json<Value> {
    let reg = st.lock();
    let list: Vec<PrimitiveSummary> = reg.primitives.iter().map(|(id, p)| summary(id, p)).collect();
    Json(json!({ "primitives": list }))
}

async fn get_primitive(State(st): State<SharedState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let reg = st.lock();
    let p = reg.primitives.get(&id).ok_or_else(|| ApiError::not_found("primitive", &id))?;
    let mut v = serde_json::to_value(summary(&id, p)).expect("summary serializes");
    if let Some(a) = &p.archive {
        v["coarse"] = serde_json::to_value(a.coarse.to_json_value(false)).expect("grid serializes");
        v["metadata"] = serde_json::to_value(&a.metadata).expect("metadata serializes");
    }
    Ok(Json(v))
}

async fn delete_primitive(State(st): State<SharedState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    let mut reg = st.lock();
    let p = reg.primitives.get(&id).ok_or_else(|| ApiError::not_found("primitive", &id))?;
    if p.training.is_some() {
        return Err(ApiError::conflict(format!("primitive {id} is training")));
    }
    reg.primitives.remove(&id);
    if let Some(dir) = &st.data {
        let path = dir.join(format!("{id}.sgpa"));
        if path.exists() {
            std::fs::remove_file(path).map_err(ServiceError::from)?;
        }
    }
    Ok(StatusCode::NO_CONTENT)
}

fn trained(reg: &Registry, id: &str) -> ApiResult<Arc<PrimitiveArchive>> {
    let p = reg.primitives.get(id).ok_or_else(|| ApiError::not_found("primitive", id))?;
    p.archive.clone().ok_or_else(|| ApiError::conflict(format!("primitive {id} is not trained yet")))
}

async fn get_archive(State(st): State<SharedState>, Path(id): Path<String>) -> ApiResult<Response> {
    let archive = trained(&st.lock(), &id)?;
    let bytes = tokio::task::spawn_blocking(move || archive.to_bytes())
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(binary(ARCHIVE_TYPE, bytes))
}

// ---------------------------------------------------------------- generation

const GENERATE_FIELDS: &[&str] = &[
    "conditioning",
    "seed",
    "t_infer",
    "mode_seeking",
    "consistency",
    "l",
    "consistency_iters",
    "w",
    "beta",
    "lambda_patch",
];

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct GenerateBody {
    /// Coarse conditioning grid; the primitive's own coarse grid if absent.
    conditioning: Option<VoxelGridJson>,
    seed: Option<u64>,
    #[serde(flatten)]
    params: GenerateRequest,
}

async fn generate(
    State(st): State<SharedState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Value>)> {
    // `deny_unknown_fields` does not combine with `flatten`, so check keys here.
    let raw: serde_json::Map<String, Value> = parse_body(&body)?;
    if let Some(k) = raw.keys().find(|k| !GENERATE_FIELDS.contains(&k.as_str())) {
        return Err(ApiError::bad_request(format!("invalid body: unknown field `{k}`")));
    }
    let body: GenerateBody =
        serde_json::from_value(Value::Object(raw)).map_err(|e| ApiError::bad_request(format!("invalid body: {e}")))?;
    let conditioning = body.conditioning.map(VoxelGrid::from_json_value).transpose()?;
    if conditioning.as_ref().is_some_and(VoxelGrid::is_empty) {
        return Err(ApiError::bad_request("empty conditioning"));
    }
    let mut reg = st.lock();
    let p = reg.primitives.get(&id).ok_or_else(|| ApiError::not_found("primitive", &id))?;
    if let Some(a) = &p.archive {
        if let Some(c) = &conditioning {
            if c.resolution != a.config.coarse_resolution {
                return Err(ApiError::bad_request(format!(
                    "conditioning resolution {} does not match primitive coarse resolution {}",
                    c.resolution, a.config.coarse_resolution
                )));
            }
        }
        body.params.options(a).sampler.expect("sampler set").validate()?;
    } else if p.training.is_none() {
        return Err(ApiError::conflict(format!("primitive {id} is not trained")));
    }
    let seed = body.seed.unwrap_or_else(|| st.next_seed());
    let job = new_job(&mut reg, JobKind::Generate, &id, Some(seed));
    let queue = reg.primitives[&id].queue.clone();
    let (st2, job2, pid, params) = (st.clone(), job.clone(), id.clone(), body.params);
    let task: Task = Box::new(move || {
        let st = st2;
        let archive = {
            let mut reg = st.lock();
            let a = reg.primitives.get(&pid).and_then(|p| p.archive.clone());
            if let Some(j) = reg.jobs.get_mut(&job2) {
                j.record.start();
            }
            a
        };
        let result = match archive {
            None => Err("primitive is not trained".to_string()),
            Some(archive) => {
                let conditioning = conditioning.unwrap_or_else(|| archive.coarse.clone());
                let bounds = archive.config.bounds;
                let total = params.steps(&archive) as f64;
                pipeline::generate(&archive, &pid, &conditioning, seed, &params, &mut |step, state| {
                    let grid = state.to_grid(bounds).occupancy_only().to_json_value(false);
                    with_job(&st, &job2, |j| {
                        j.states.push(StepState { step, grid });
                        j.record.advance((step + 1) as f64 / (total + 1.0));
                    });
                })
                .map_err(|e| e.to_string())
            }
        };
        let mut reg = st.lock();
        if let Some(j) = reg.jobs.get_mut(&job2) {
            let outcome = result.map(|g| {
                j.output = Some(JobOutput::Generated {
                    layer: Arc::new(g.layer),
                    grid_json: Arc::new(g.grid_json),
                    splat: Arc::new(g.splat),
                });
            });
            j.record.finish(outcome);
        }
    });
    queue.send(task).map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "worker stopped"))?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "job": job, "seed": seed }))))
}

// ---------------------------------------------------------------------- jobs

#[derive(Debug, Default, Deserialize)]
struct JobQuery {
    since: Option<usize>,
}

async fn list_jobs(State(st): State<SharedState>) -> Json<Value> {
    let reg = st.lock();
    let list: Vec<&JobRecord> = reg.jobs.values().map(|j| &j.record).collect();
    Json(json!({ "jobs": list }))
}

/// Job record plus intermediate states from index `since` on.
async fn get_job(
    State(st): State<SharedState>,
    Path(id): Path<String>,
    Query(q): Query<JobQuery>,
) -> ApiResult<Json<Value>> {
    let reg = st.lock();
    let j = reg.jobs.get(&id).ok_or_else(|| ApiError::not_found("job", &id))?;
    let since = q.since.unwrap_or(0).min(j.states.len());
    let mut v = serde_json::to_value(&j.record).expect("record serializes");
    v["states"] = serde_json::to_value(&j.states[since..]).expect("states serialize");
    v["state_count"] = json!(j.states.len());
    Ok(Json(v))
}

fn finished_output(reg: &Registry, id: &str) -> ApiResult<(JobRecord, JobOutput)> {
    let j = reg.jobs.get(id).ok_or_else(|| ApiError::not_found("job", id))?;
    match (&j.record.status, &j.output) {
        (JobStatus::Done, Some(o)) => Ok((j.record.clone(), o.clone())),
        (JobStatus::Failed, _) => Err(ApiError::conflict(format!(
            "job {id} failed: {}",
            j.record.error.as_deref().unwrap_or("unknown error")
        ))),
        _ => Err(ApiError::conflict(format!("job {id} has not finished"))),
    }
}

async fn get_result(State(st): State<SharedState>, Path(id): Path<String>) -> ApiResult<Response> {
    let (record, output) = finished_output(&st.lock(), &id)?;
    let body = match output {
        JobOutput::Generated { layer, grid_json, .. } => {
            let grid: Value = serde_json::from_str(&grid_json).expect("stored grid is JSON");
            json!({
                "job": id,
                "primitive": record.primitive_id,
                "seed": layer.seed,
                "voxels": layer.grid.len(),
                "points": layer.cloud.len(),
                "grid": grid,
                "splat": format!("/jobs/{id}/result/splat"),
                "splat_content_type": PLY_TYPE,
            })
        }
        JobOutput::Trained => json!({
            "job": id,
            "primitive": record.primitive_id,
            "archive": format!("/primitives/{}/archive", record.primitive_id),
        }),
    };
    let text = serde_json::to_string(&body).map_err(ServiceError::from)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], text).into_response())
}

async fn get_result_splat(State(st): State<SharedState>, Path(id): Path<String>) -> ApiResult<Response> {
    match finished_output(&st.lock(), &id)? {
        (_, JobOutput::Generated { splat, .. }) => Ok(binary(PLY_TYPE, splat.as_ref().clone())),
        _ => Err(ApiError::bad_request(format!("job {id} has no splat output"))),
    }
}

// -------------------------------------------------------------------- scenes

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CreateSceneBody {
    id: Option<String>,
}

async fn create_scene(State(st): State<SharedState>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let body: CreateSceneBody = parse_body(&body)?;
    let mut reg = st.lock();
    let id = match body.id {
        Some(id) if id.is_empty() => return Err(ApiError::bad_request("scene id must not be empty")),
        Some(id) => id,
        None => {
            reg.next_scene += 1;
            format!("s{}", reg.next_scene)
        }
    };
    if reg.scenes.contains_key(&id) {
        return Err(ApiError::conflict(format!("scene {id} exists")));
    }
    reg.scenes.insert(id.clone(), Scene::default());
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))))
}

async fn list_scenes(State(st): State<SharedState>) -> Json<Value> {
    let reg = st.lock();
    let ids: Vec<&String> = reg.scenes.keys().collect();
    Json(json!({ "scenes": ids }))
}

fn scene_mut<'a>(reg: &'a mut Registry, id: &str) -> ApiResult<&'a mut Scene> {
    reg.scenes.get_mut(id).ok_or_else(|| ApiError::not_found("scene", id))
}

async fn get_scene(State(st): State<SharedState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let mut reg = st.lock();
    let d = scene_mut(&mut reg, &id)?.describe();
    Ok(Json(json!({ "id": id, "scene": d })))
}

async fn delete_scene(State(st): State<SharedState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    st.lock().scenes.remove(&id).ok_or_else(|| ApiError::not_found("scene", &id))?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AddLayerBody {
    id: String,
    /// Finished generation job whose output becomes the layer.
    job: Option<String>,
    /// Base64 splat file, as an alternative to `job`.
    splat: Option<String>,
    transform: Option<SimilarityTransform>,
    gain: Option<[f32; 3]>,
}

async fn add_layer(
    State(st): State<SharedState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let body: AddLayerBody = parse_body(&body)?;
    let uploaded = match (&body.job, &body.splat) {
        (Some(_), None) => None,
        (None, Some(s)) => Some(pipeline::load_cloud(&decode_b64("splat", s)?, None)?),
        _ => return Err(ApiError::bad_request("need exactly one of job or splat")),
    };
    let mut reg = st.lock();
    if !reg.scenes.contains_key(&id) {
        return Err(ApiError::not_found("scene", &id));
    }
    let mut layer = match (uploaded, &body.job) {
        (Some(cloud), _) => Layer {
            id: String::new(),
            primitive_id: String::new(),
            seed: 0,
            cloud,
            grid: VoxelGrid::new(1, Bounds::unit()),
            conditioning: VoxelGrid::new(1, Bounds::unit()),
            transform: SimilarityTransform::identity(),
            gain: [1.0; 3],
        },
        (None, Some(job)) => match finished_output(&reg, job)? {
            (_, JobOutput::Generated { layer, .. }) => layer.as_ref().clone(),
            _ => return Err(ApiError::bad_request(format!("job {job} is not a generation job"))),
        },
        (None, None) => unreachable!("checked above"),
    };
    layer.id = body.id;
    if let Some(t) = body.transform {
        layer.transform = t;
    }
    if let Some(g) = body.gain {
        layer.gain = g;
    }
    let scene = scene_mut(&mut reg, &id)?;
    let layer_id = layer.id.clone();
    scene.add_layer(layer)?;
    Ok((StatusCode::CREATED, Json(json!({ "scene": id, "layer": layer_id, "description": scene.describe() }))))
}

async fn get_layer(State(st): State<SharedState>, Path((id, layer)): Path<(String, String)>) -> ApiResult<Json<Value>> {
    let mut reg = st.lock();
    let d = scene_mut(&mut reg, &id)?.describe();
    let l = d.layers.into_iter().find(|l| l.id == layer).ok_or_else(|| ApiError::not_found("layer", &layer))?;
    Ok(Json(serde_json::to_value(l).expect("layer serializes")))
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct UpdateLayerBody {
    transform: Option<SimilarityTransform>,
    gain: Option<[f32; 3]>,
}

async fn update_layer(
    State(st): State<SharedState>,
    Path((id, layer)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let body: UpdateLayerBody = parse_body(&body)?;
    let mut reg = st.lock();
    let scene = scene_mut(&mut reg, &id)?;
    let l = scene.layer(&layer).ok_or_else(|| ApiError::not_found("layer", &layer))?;
    let (t, g) = (body.transform.unwrap_or(l.transform), body.gain.unwrap_or(l.gain));
    scene.update_layer(&layer, t, g)?;
    Ok(Json(json!({ "scene": id, "description": scene.describe() })))
}

async fn delete_layer(
    State(st): State<SharedState>,
    Path((id, layer)): Path<(String, String)>,
) -> ApiResult<StatusCode> {
    let mut reg = st.lock();
    scene_mut(&mut reg, &id)?.remove_layer(&layer).ok_or_else(|| ApiError::not_found("layer", &layer))?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DuplicateBody {
    id: String,
}

async fn duplicate_layer(
    State(st): State<SharedState>,
    Path((id, layer)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let body: DuplicateBody = parse_body(&body)?;
    let mut reg = st.lock();
    let scene = scene_mut(&mut reg, &id)?;
    if scene.layer(&layer).is_none() {
        return Err(ApiError::not_found("layer", &layer));
    }
    scene.duplicate_layer(&layer, &body.id)?;
    Ok((StatusCode::CREATED, Json(json!({ "scene": id, "layer": body.id, "description": scene.describe() }))))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StaticBody {
    splat: String,
}

async fn add_static(State(st): State<SharedState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let body: StaticBody = parse_body(&body)?;
    let cloud = pipeline::load_cloud(&decode_b64("splat", &body.splat)?, None)?;
    let mut reg = st.lock();
    let scene = scene_mut(&mut reg, &id)?;
    scene.static_regions.push(cloud);
    Ok(Json(json!({ "scene": id, "description": scene.describe() })))
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ExportBody {
    allow_empty: bool,
}

async fn export(State(st): State<SharedState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let body: ExportBody = parse_body(&body)?;
    let scene = scene_mut(&mut st.lock(), &id)?.clone();
    let (n, bytes) = tokio::task::spawn_blocking(move || export_scene_bytes(&scene, body.allow_empty))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let mut resp = binary(PLY_TYPE, bytes);
    resp.headers_mut().insert("x-gaussian-count", n.into());
    Ok(resp)
}
