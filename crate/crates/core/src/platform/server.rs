//! JSON-over-HTTP service. Jobs are accepted with 202, validated up front
//! (400 on schema errors, 404 on unknown concepts) and run on blocking
//! worker threads, at most `workers` at a time. At most one training job
//! per concept id runs at once; a second one gets 409.

use super::commands::variant_id;
use super::config::ServerConfig;
use super::wire::{image_from_base64, image_to_base64, RunLength};
use super::{Config, ConceptStore};
use crate::backbone::{pretrain_base, BaseModel, PretrainConfig};
use crate::error::{Error, Result};
use crate::evalharness::{run_benchmark, MetricReport};
use crate::inference::{self, RunRecord, Sampling};
use crate::sketchrep::{auto_mask, rasterize, DualSketch, ForegroundMask, Image, Raster, Stroke, TrainingPair};
use crate::trainer::{train_concept, AblationFlags, StageConfig, TrainSpec};
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Instant;
use tokio::sync::Semaphore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, Serialize)]
pub struct JobInfo {
    pub id: String,
    pub kind: String,
    pub status: JobStatus,
    /// The request exactly as submitted.
    pub request: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
}

struct Job {
    info: JobInfo,
    result: Option<Value>,
}

/// Shared service state; model objects are immutable snapshots.
#[derive(Clone)]
pub struct AppState {
    base: Arc<BaseModel>,
    base_hash: Arc<str>,
    store: ConceptStore,
    cfg: Arc<Config>,
    jobs: Arc<Mutex<BTreeMap<String, Job>>>,
    training: Arc<Mutex<BTreeSet<String>>>,
    next_id: Arc<Mutex<u64>>,
    workers: Arc<Semaphore>,
}

impl AppState {
    pub fn new(base: BaseModel, store: ConceptStore, cfg: Config) -> Self {
        let base_hash: Arc<str> = base.hash().into();
        let workers = Arc::new(Semaphore::new(cfg.server.workers.max(1)));
        Self {
            base: Arc::new(base),
            base_hash,
            store,
            cfg: Arc::new(cfg),
            jobs: Arc::default(),
            training: Arc::default(),
            next_id: Arc::default(),
            workers,
        }
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Conflict(_) => StatusCode::CONFLICT,
            Error::Io(_) | Error::Integrity(_) | Error::Diverged { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError(code, e.to_string())
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SketchPayload {
    strokes: Vec<Stroke>,
    #[serde(default)]
    mask: Option<RunLength>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratePayload {
    concept: String,
    #[serde(flatten)]
    sketch: SketchPayload,
    prompt: String,
    #[serde(default)]
    steps: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EditPayload {
    concept: String,
    /// Concept shown in `image`, for transfers.
    #[serde(default)]
    target: Option<String>,
    image: String,
    #[serde(flatten)]
    sketch: SketchPayload,
    #[serde(default)]
    blend_mask: Option<RunLength>,
    prompt: String,
    #[serde(default)]
    steps: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairPayload {
    image: String,
    strokes: Vec<Stroke>,
    #[serde(default)]
    mask: Option<RunLength>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainPayload {
    concept_id: String,
    class_name: String,
    pairs: Vec<PairPayload>,
    #[serde(default)]
    ablate: Option<String>,
    #[serde(default)]
    stage1: Option<StageConfig>,
    #[serde(default)]
    stage2: Option<StageConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchPayload {
    manifest: PathBuf,
    #[serde(default = "full")]
    variants: String,
}

fn full() -> String {
    "full".into()
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PretrainPayload {
    #[serde(default)]
    steps: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JobRequest {
    kind: String,
    #[serde(default)]
    payload: Value,
}

fn parse<T: serde::de::DeserializeOwned>(v: &Value) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| Error::InvalidArgument(format!("payload: {e}")))
}

fn sketch_of(p: &SketchPayload, size: usize) -> Result<(DualSketch, ForegroundMask)> {
    let ds = rasterize(&p.strokes, size, size)?;
    let m = match &p.mask {
        Some(rl) => ForegroundMask::new(rl.decode()?)?,
        None => auto_mask(&ds)?,
    };
    if m.raster().width() != size || m.raster().height() != size {
        return Err(Error::Shape(format!("mask must be {size}x{size}")));
    }
    Ok((ds, m))
}

/// A validated job ready to run on a worker.
enum Work {
    Generate { concept: String, ds: DualSketch, m: ForegroundMask, prompt: String, s: Sampling },
    Edit { concept: String, target: Option<String>, image: Image, ds: DualSketch, m: ForegroundMask, m_b: Raster, prompt: String, s: Sampling },
    Train { spec: TrainSpec, pairs: Vec<TrainingPair> },
    Bench { manifest: PathBuf, variants: Vec<AblationFlags> },
    Pretrain { cfg: PretrainConfig },
}

fn validate(st: &AppState, req: &JobRequest) -> Result<Work> {
    let size = st.base.denoiser_cfg.size;
    let sampling = |steps: Option<usize>, seed: Option<u64>| Sampling { steps: steps.unwrap_or(st.cfg.sampling.steps), seed: seed.unwrap_or(st.cfg.sampling.seed) };
    match req.kind.as_str() {
        "generate" => {
            let p: GeneratePayload = parse(&req.payload)?;
            inference::concept_tokens(&st.base, &p.prompt, 1)?;
            st.store.head(&p.concept)?;
            let (ds, m) = sketch_of(&p.sketch, size)?;
            Ok(Work::Generate { concept: p.concept, ds, m, prompt: p.prompt, s: sampling(p.steps, p.seed) })
        }
        "edit" => {
            let p: EditPayload = parse(&req.payload)?;
            inference::concept_tokens(&st.base, &p.prompt, 1)?;
            st.store.head(&p.concept)?;
            if let Some(t) = &p.target {
                st.store.head(t)?;
            }
            let (ds, m) = sketch_of(&p.sketch, size)?;
            let image = image_from_base64(&p.image)?;
            if image.width() != size || image.height() != size {
                return Err(Error::Shape(format!("image must be {size}x{size}")));
            }
            let m_b = match &p.blend_mask {
                Some(rl) => rl.decode()?,
                None => m.raster().clone(),
            };
            Ok(Work::Edit { concept: p.concept, target: p.target, image, ds, m, m_b, prompt: p.prompt, s: sampling(p.steps, p.seed) })
        }
        "train_concept" => {
            let p: TrainPayload = parse(&req.payload)?;
            if p.pairs.is_empty() {
                return Err(Error::InvalidArgument("training needs at least one pair".into()));
            }
            let flags = match &p.ablate {
                Some(a) => AblationFlags::parse(a)?,
                None => st.cfg.flags,
            };
            let mut pairs = Vec::new();
            for pp in &p.pairs {
                let (sketch, mask) = sketch_of(&SketchPayload { strokes: pp.strokes.clone(), mask: pp.mask.clone() }, size)?;
                let pair = TrainingPair {
                    image: image_from_base64(&pp.image)?,
                    sketch,
                    mask,
                    class_name: p.class_name.clone(),
                    concept_id: p.concept_id.clone(),
                    caption: format!("a photo of a {}", p.class_name),
                };
                pair.validate()?;
                pairs.push(pair);
            }
            let spec = TrainSpec {
                concept_id: variant_id(&p.concept_id, &flags),
                class_name: p.class_name,
                stage1: p.stage1.unwrap_or_else(|| st.cfg.stage1.clone()),
                stage2: p.stage2.unwrap_or_else(|| st.cfg.stage2.clone()),
                flags,
                weights: st.cfg.weights,
            };
            spec.stage1.validate()?;
            spec.stage2.validate()?;
            Ok(Work::Train { spec, pairs })
        }
        "benchmark" => {
            let p: BenchPayload = parse(&req.payload)?;
            let variants = p.variants.split(',').map(str::trim).filter(|v| !v.is_empty()).map(AblationFlags::parse).collect::<Result<Vec<_>>>()?;
            Ok(Work::Bench { manifest: p.manifest, variants })
        }
        "pretrain" => {
            let p: PretrainPayload = if req.payload.is_null() { PretrainPayload::default() } else { parse(&req.payload)? };
            let mut cfg = st.cfg.pretrain.clone();
            cfg.steps = p.steps.unwrap_or(cfg.steps);
            cfg.seed = p.seed.unwrap_or(cfg.seed);
            Ok(Work::Pretrain { cfg })
        }
        k => Err(Error::InvalidArgument(format!("unknown job kind {k:?}"))),
    }
}

fn image_result(img: &Image, record: &RunRecord) -> Result<Value> {
    Ok(json!({ "image": image_to_base64(img)?, "record": record }))
}

fn execute(st: &AppState, work: Work) -> Result<Value> {
    let base = &*st.base;
    match work {
        Work::Generate { concept, ds, m, prompt, s } => {
            let c = st.store.load_concept(&concept, None, base)?;
            let img = inference::generate(base, &c, &ds, &m, &prompt, s)?;
            image_result(&img, &RunRecord::new("generate", &prompt, s, base, &[&c]))
        }
        Work::Edit { concept, target, image, ds, m, m_b, prompt, s } => {
            let c = st.store.load_concept(&concept, None, base)?;
            match target {
                Some(t) => {
                    let t = st.store.load_concept(&t, None, base)?;
                    let img = inference::concept_transfer(base, &t, &c, &image, &ds, &m, &m_b, &prompt, s)?;
                    image_result(&img, &RunRecord::new("transfer", &prompt, s, base, &[&t, &c]))
                }
                None => {
                    let img = inference::local_edit(base, &c, &image, &ds, &m, &m_b, &prompt, s)?;
                    image_result(&img, &RunRecord::new("edit", &prompt, s, base, &[&c]))
                }
            }
        }
        Work::Train { spec, pairs } => {
            let c = train_concept(base, &pairs, &spec)?;
            let hash = st.store.save_concept(&c)?;
            Ok(json!({ "concept_id": c.concept_id, "hash": hash, "norm_v": c.token.norm() }))
        }
        Work::Bench { manifest, variants } => {
            let datasets = super::commands::load_datasets(&manifest)?;
            let mut concepts = BTreeMap::new();
            for f in &variants {
                for ds in &datasets {
                    let c = st.store.load_concept(&variant_id(&ds.manifest.concept_id, f), None, base)?;
                    concepts.insert((f.name(), ds.manifest.concept_id.clone()), c);
                }
            }
            let report: MetricReport = run_benchmark(base, &datasets, &concepts, &variants, &st.cfg.bench)?;
            Ok(serde_json::to_value(report)?)
        }
        Work::Pretrain { cfg } => {
            let corpus = crate::sketchrep::synth::base_corpus(
                st.cfg.corpus.pairs,
                cfg.denoiser.size,
                &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(st.cfg.corpus.seed),
            )?;
            let (b, _) = pretrain_base(&corpus, &cfg)?;
            let hash = st.store.save_base(&b)?;
            Ok(json!({ "base_hash": hash }))
        }
    }
}

fn set_status(st: &AppState, id: &str, f: impl FnOnce(&mut Job)) {
    if let Some(j) = st.jobs.lock().expect("job table").get_mut(id) {
        f(j);
    }
}

async fn submit(State(st): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let raw: Value = serde_json::from_slice(&body).map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("body is not JSON: {e}")))?;
    let req: JobRequest = serde_json::from_value(raw.clone()).map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("job request: {e}")))?;
    let work = validate(&st, &req)?;
    let lock = match &work {
        Work::Train { spec, .. } => {
            let mut t = st.training.lock().expect("training set");
            if !t.insert(spec.concept_id.clone()) {
                return Err(Error::Conflict(format!("concept {} is already being trained", spec.concept_id)).into());
            }
            Some(spec.concept_id.clone())
        }
        _ => None,
    };
    let id = {
        let mut n = st.next_id.lock().expect("id counter");
        *n += 1;
        format!("job-{:06}", *n)
    };
    let info = JobInfo { id: id.clone(), kind: req.kind.clone(), status: JobStatus::Queued, request: raw, error: None, seconds: None };
    st.jobs.lock().expect("job table").insert(id.clone(), Job { info: info.clone(), result: None });
    let st2 = st.clone();
    let jid = id.clone();
    tokio::spawn(async move {
        let permit = st2.workers.clone().acquire_owned().await.expect("semaphore open");
        set_status(&st2, &jid, |j| j.info.status = JobStatus::Running);
        let st3 = st2.clone();
        let start = Instant::now();
        let out = tokio::task::spawn_blocking(move || execute(&st3, work)).await;
        let secs = start.elapsed().as_secs_f64();
        drop(permit);
        set_status(&st2, &jid, |j| {
            j.info.seconds = Some(secs);
            match out {
                Ok(Ok(v)) => {
                    j.result = Some(v);
                    j.info.status = JobStatus::Done;
                }
                Ok(Err(e)) => {
                    j.info.error = Some(e.to_string());
                    j.info.status = JobStatus::Failed;
                }
                Err(e) => {
                    j.info.error = Some(format!("worker panicked: {e}"));
                    j.info.status = JobStatus::Failed;
                }
            }
        });
        if let Some(c) = lock {
            st2.training.lock().expect("training set").remove(&c);
        }
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "id": id, "status": JobStatus::Queued }))).into_response())
}

async fn job(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<JobInfo>> {
    st.jobs.lock().expect("job table").get(&id).map(|j| Json(j.info.clone())).ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no job {id}")))
}

async fn job_result(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let jobs = st.jobs.lock().expect("job table");
    let j = jobs.get(&id).ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no job {id}")))?;
    match (&j.info.status, &j.result) {
        (JobStatus::Done, Some(v)) => Ok(Json(v.clone())),
        (JobStatus::Failed, _) => Err(ApiError(StatusCode::CONFLICT, format!("job {id} failed: {}", j.info.error.clone().unwrap_or_default()))),
        (s, _) => Err(ApiError(StatusCode::CONFLICT, format!("job {id} is {s:?}, no result yet"))),
    }
}

async fn jobs(State(st): State<AppState>) -> Json<Vec<JobInfo>> {
    Json(st.jobs.lock().expect("job table").values().map(|j| j.info.clone()).collect())
}

async fn health(State(st): State<AppState>) -> Json<Value> {
    Json(json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION"), "base_hash": &*st.base_hash, "size": st.base.denoiser_cfg.size }))
}

async fn concepts(State(st): State<AppState>) -> ApiResult<Json<Value>> {
    Ok(Json(serde_json::to_value(st.store.list()?).map_err(Error::from)?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EchoRequest {
    strokes: Vec<Stroke>,
    #[serde(default)]
    size: Option<usize>,
}

/// Rasterise strokes as training and inference would and report where the
/// ink landed, plus the automatic mask.
async fn sketch_echo(State(st): State<AppState>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: EchoRequest = serde_json::from_slice(&body).map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("echo request: {e}")))?;
    let size = req.size.unwrap_or(st.base.denoiser_cfg.size);
    let ds = rasterize(&req.strokes, size, size)?;
    let (mask, mask_error) = match auto_mask(&ds) {
        Ok(m) => (Some(RunLength::encode(m.raster())), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(Json(json!({
        "size": size,
        "contour_ink": ds.s_c.count_on(),
        "detail_ink": ds.s_d.count_on(),
        "s_c": RunLength::encode(&ds.s_c),
        "s_d": RunLength::encode(&ds.s_d),
        "auto_mask": mask,
        "auto_mask_error": mask_error,
    })))
}

async fn openapi() -> Json<Value> {
    Json(api_description())
}

/// Machine-readable description of every endpoint.
pub fn api_description() -> Value {
    let point = json!({ "type": "array", "items": { "type": "number", "minimum": 0, "maximum": 1 }, "minItems": 2, "maxItems": 2 });
    let stroke = json!({
        "type": "object",
        "required": ["kind", "width", "points"],
        "properties": { "kind": { "enum": ["contour", "detail"] }, "width": { "type": "integer", "minimum": 1 }, "points": { "type": "array", "items": point, "minItems": 2 } }
    });
    let rle = json!({
        "type": "object",
        "description": "row-major run lengths, alternating, starting with zeros",
        "required": ["width", "height", "counts"],
        "properties": { "width": { "type": "integer" }, "height": { "type": "integer" }, "counts": { "type": "array", "items": { "type": "integer" } } }
    });
    let png = json!({ "type": "string", "description": "base64 PNG" });
    let err = json!({ "description": "error", "content": { "application/json": { "schema": { "$ref": "#/components/schemas/Error" } } } });
    json!({
        "openapi": "3.0.3",
        "info": { "title": "sketch-concept", "version": env!("CARGO_PKG_VERSION") },
        "paths": {
            "/health": { "get": { "responses": { "200": { "description": "version and base hash" } } } },
            "/concepts": { "get": { "responses": { "200": { "description": "stored concepts" } } } },
            "/jobs": {
                "get": { "responses": { "200": { "description": "all jobs" } } },
                "post": {
                    "requestBody": { "content": { "application/json": { "schema": { "$ref": "#/components/schemas/JobRequest" } } } },
                    "responses": { "202": { "description": "accepted; body has the job id" }, "400": err, "404": err, "409": err }
                }
            },
            "/jobs/{id}": { "get": { "responses": { "200": { "description": "job record" }, "404": err } } },
            "/jobs/{id}/result": { "get": { "responses": { "200": { "description": "job result" }, "404": err, "409": err } } },
            "/sketch/echo": {
                "post": {
                    "requestBody": { "content": { "application/json": { "schema": { "$ref": "#/components/schemas/EchoRequest" } } } },
                    "responses": { "200": { "description": "ink counts per sketch channel, rasters and auto mask" }, "400": err }
                }
            },
            "/openapi.json": { "get": { "responses": { "200": { "description": "this document" } } } }
        },
        "components": { "schemas": {
            "Error": { "type": "object", "properties": { "error": { "type": "string" } } },
            "Stroke": stroke,
            "RunLength": rle,
            "EchoRequest": { "type": "object", "required": ["strokes"], "properties": { "strokes": { "type": "array", "items": { "$ref": "#/components/schemas/Stroke" } }, "size": { "type": "integer" } } },
            "JobRequest": {
                "type": "object",
                "required": ["kind"],
                "properties": {
                    "kind": { "enum": ["generate", "edit", "train_concept", "benchmark", "pretrain"] },
                    "payload": { "oneOf": [
                        { "$ref": "#/components/schemas/Generate" }, { "$ref": "#/components/schemas/Edit" },
                        { "$ref": "#/components/schemas/Train" }, { "$ref": "#/components/schemas/Benchmark" }, { "$ref": "#/components/schemas/Pretrain" }
                    ] }
                }
            },
            "Generate": { "type": "object", "required": ["concept", "strokes", "prompt"], "properties": {
                "concept": { "type": "string" }, "strokes": { "type": "array", "items": { "$ref": "#/components/schemas/Stroke" } },
                "mask": { "$ref": "#/components/schemas/RunLength" }, "prompt": { "type": "string" }, "steps": { "type": "integer" }, "seed": { "type": "integer" } } },
            "Edit": { "type": "object", "required": ["concept", "image", "strokes", "prompt"], "properties": {
                "concept": { "type": "string" }, "target": { "type": "string" }, "image": png, "strokes": { "type": "array", "items": { "$ref": "#/components/schemas/Stroke" } },
                "mask": { "$ref": "#/components/schemas/RunLength" }, "blend_mask": { "$ref": "#/components/schemas/RunLength" },
                "prompt": { "type": "string" }, "steps": { "type": "integer" }, "seed": { "type": "integer" } } },
            "Train": { "type": "object", "required": ["concept_id", "class_name", "pairs"], "properties": {
                "concept_id": { "type": "string" }, "class_name": { "type": "string" }, "ablate": { "type": "string" },
                "pairs": { "type": "array", "items": { "type": "object", "required": ["image", "strokes"], "properties": {
                    "image": png, "strokes": { "type": "array", "items": { "$ref": "#/components/schemas/Stroke" } }, "mask": { "$ref": "#/components/schemas/RunLength" } } } },
                "stage1": { "type": "object" }, "stage2": { "type": "object" } } },
            "Benchmark": { "type": "object", "required": ["manifest"], "properties": { "manifest": { "type": "string" }, "variants": { "type": "string" } } },
            "Pretrain": { "type": "object", "properties": { "steps": { "type": "integer" }, "seed": { "type": "integer" } } }
        } }
    })
}

async fn not_found() -> ApiError {
    ApiError(StatusCode::NOT_FOUND, "no such endpoint".into())
}

pub fn router(st: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/concepts", get(concepts))
        .route("/jobs", post(submit).get(jobs))
        .route("/jobs/{id}", get(job))
        .route("/jobs/{id}/result", get(job_result))
        .route("/sketch/echo", post(sketch_echo))
        .route("/openapi.json", get(openapi))
        .fallback(not_found)
        .with_state(st)
}

/// Run the service until the process is stopped.
pub fn serve_blocking(cfg: &ServerConfig, st: AppState) -> Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((cfg.host.as_str(), cfg.port)).await?;
        log::warn!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(st)).await?;
        Ok(())
    })
}
