//! JSON-over-HTTP editing service.
//!
//! Shared base weights are read-only; fine-tuning works on a per-session
//! copy. A session runs at most one fine-tune job, and edits on that session
//! are refused with 409 while it runs.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use facectl_core::editor::{
    ablation_strategies, edit, image_digest, inpaint, learn_attribute_direction, EditRequest, EditTrace,
    InpaintOptions, MaskStrategy, ParamOverrides,
};
use facectl_core::face::{fit_params, render_snapshots, Dataset, FaceParams, ToyFaceModel};
use facectl_core::imageio::Image;
use facectl_core::nn::{ModelBundle, Tensor};
use facectl_core::train::{finetune_one_shot, snapshot_tensor, TrainConfig, TrainLogLine, TrainObserver, TrainSample};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::Config;
use crate::session::{HistoryEntry, HistoryKind, ParamsSource, Session, SessionDir, SessionRecord};
use crate::{attribute_value, decode_png_base64, png_base64, ATTRIBUTES};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    path: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            path: None,
        }
    }
    fn bad(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }
    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl From<facectl_core::Error> for ApiError {
    fn from(e: facectl_core::Error) -> Self {
        use facectl_core::Error as E;
        let status = match e {
            E::InvalidArgument(_) => StatusCode::BAD_REQUEST,
            E::InvalidState(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(p) = self.path {
            body["path"] = json!(p);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Parses a JSON body; failures name the offending field path.
fn parse_body<T: DeserializeOwned>(bytes: &[u8]) -> ApiResult<T> {
    let text = if bytes.iter().all(|b| b.is_ascii_whitespace()) {
        &b"{}"[..]
    } else {
        bytes
    };
    let de = &mut serde_json::Deserializer::from_slice(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ApiError {
            status: StatusCode::BAD_REQUEST,
            message: e.into_inner().to_string(),
            path: Some(path),
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: String,
    pub session_id: String,
    pub state: JobState,
    /// In `[0, 1]`.
    pub progress: f64,
    pub error: Option<String>,
}

pub struct AppState {
    pub config: Config,
    pub base: Arc<ModelBundle>,
    pub model: Arc<ToyFaceModel>,
    pub dataset: Option<Arc<Dataset>>,
    pub directions: BTreeMap<String, Vec<f32>>,
    store: SessionDir,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    jobs: Mutex<HashMap<String, JobStatus>>,
    counter: Mutex<u64>,
}

impl AppState {
    pub fn new(
        config: Config,
        base: ModelBundle,
        model: ToyFaceModel,
        dataset: Option<Dataset>,
    ) -> Result<Arc<Self>, String> {
        if base.control.is_none() {
            return Err("service checkpoint has no control network".into());
        }
        let store = SessionDir::new(config.serve.sessions_dir.clone());
        let loaded = store.load_all()?;
        let counter = loaded
            .keys()
            .filter_map(|k| k.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()))
            .max()
            .unwrap_or(0);
        let directions = match &dataset {
            Some(ds) => learn_directions(&base, ds).map_err(|e| e.to_string())?,
            None => BTreeMap::new(),
        };
        Ok(Arc::new(Self {
            config,
            base: Arc::new(base),
            model: Arc::new(model),
            dataset: dataset.map(Arc::new),
            directions,
            store,
            sessions: Mutex::new(
                loaded
                    .into_iter()
                    .map(|(k, s)| (k, Arc::new(Mutex::new(s))))
                    .collect(),
            ),
            jobs: Mutex::new(HashMap::new()),
            counter: Mutex::new(counter),
        }))
    }

    fn next_id(&self, prefix: char) -> String {
        let mut c = self.counter.lock().expect("counter lock");
        *c += 1;
        format!("{prefix}{:04}", *c)
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<Session>>> {
        self.sessions
            .lock()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id}")))
    }
}

/// Directions from the training split's codes, labelled by the generator
/// metadata split at the median.
fn learn_directions(base: &ModelBundle, ds: &Dataset) -> facectl_core::Result<BTreeMap<String, Vec<f32>>> {
    let idx = ds.indices_with_split("train");
    let codes: Vec<Vec<f32>> = idx
        .iter()
        .map(|&i| base.encoder.encode(&Tensor::from(&ds.images[i])))
        .collect();
    let mut out = BTreeMap::new();
    for name in ATTRIBUTES {
        let values: Vec<f64> = idx
            .iter()
            .filter_map(|&i| attribute_value(name, &ds.manifest.records[i].params))
            .collect();
        if values.len() != idx.len() {
            continue;
        }
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        let labels: Vec<bool> = values.iter().map(|v| *v > median).collect();
        if labels.iter().all(|l| *l) || labels.iter().all(|l| !*l) {
            continue;
        }
        out.insert(name.to_string(), learn_attribute_direction(&codes, &labels)?);
    }
    Ok(out)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/info", get(info))
        .route("/api/samples", get(samples))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/finetune", post(start_finetune))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/sessions/{id}/edit", post(edit_session))
        .route("/api/sessions/{id}/inpaint", post(inpaint_session))
        .route("/api/sessions/{id}/manipulate", post(manipulate_session))
        .route("/api/sessions/{id}/snapshot-preview", get(snapshot_preview))
        .with_state(state)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

async fn info(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let strategies: Vec<_> = ablation_strategies()
        .into_iter()
        .map(|(l, s)| json!({ "label": l.to_string(), "strategy": s }))
        .collect();
    Json(json!({
        "net_config": st.base.config,
        "schedule": st.base.schedule,
        "stage": st.base.stage,
        "image_size": st.base.config.image_size,
        "checkpoint_digest": st.base.checksum(),
        "strategies": strategies,
        "default_strategy": MaskStrategy::Linear,
        "default_t_inf": st.config.edit.t_inf,
        "directions": st.directions.keys().collect::<Vec<_>>(),
        "model": st.model.spec,
    }))
}

#[derive(Deserialize)]
struct SamplesQuery {
    n: Option<usize>,
}

async fn samples(State(st): State<Arc<AppState>>, Query(q): Query<SamplesQuery>) -> ApiResult<Json<serde_json::Value>> {
    let ds = st
        .dataset
        .as_ref()
        .ok_or_else(|| ApiError::not_found("no dataset configured"))?;
    let n = q.n.unwrap_or(8).min(64);
    let mut out = Vec::new();
    for i in ds.indices_with_split("test").into_iter().take(n) {
        let r = &ds.manifest.records[i];
        out.push(json!({
            "index": i,
            "identity": r.identity,
            "image_png_base64": png_base64(&ds.images[i])?,
            "params": r.params,
        }));
    }
    Ok(Json(json!({ "samples": out })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    sample: Option<usize>,
    image_png_base64: Option<String>,
    params: Option<FaceParams>,
    #[serde(default)]
    fit_seed: u64,
}

async fn create_session(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: CreateSession = parse_body(&body)?;
    let size = st.base.config.image_size;
    let (image, params, source, index) = match (req.sample, req.image_png_base64) {
        (Some(i), None) => {
            let ds = st
                .dataset
                .as_ref()
                .ok_or_else(|| ApiError::not_found("no dataset configured"))?;
            let r = ds
                .manifest
                .records
                .get(i)
                .ok_or_else(|| ApiError::bad(format!("sample {i} outside the dataset")))?;
            (ds.images[i].clone(), r.params.clone(), ParamsSource::Oracle, Some(i))
        }
        (None, Some(b64)) => {
            let image = decode_png_base64(&b64).map_err(|m| ApiError {
                path: Some("image_png_base64".into()),
                ..ApiError::bad(m)
            })?;
            if image.height != size || image.width != size {
                return Err(ApiError {
                    path: Some("image_png_base64".into()),
                    ..ApiError::bad(format!("image must be {size}x{size}"))
                });
            }
            match req.params {
                Some(p) => {
                    p.validate(&st.model)?;
                    (image, p, ParamsSource::Supplied, None)
                }
                None => {
                    let (m, budget, img) = (st.model.clone(), st.config.serve.fit_budget, image.clone());
                    let fit = blocking(move || {
                        Ok(fit_params(&img, &m, &FaceParams::neutral(&m), budget, req.fit_seed, None)?)
                    })
                    .await?;
                    (image, fit.params, ParamsSource::Fitted, None)
                }
            }
        }
        _ => return Err(ApiError::bad("give exactly one of `sample` or `image_png_base64`")),
    };
    let id = st.next_id('s');
    let record = SessionRecord {
        id: id.clone(),
        params,
        params_source: source,
        sample_index: index,
        finetuned_digest: None,
        history: Vec::new(),
    };
    let session = Session::new(record.clone(), image);
    st.store.save_record(&session).map_err(ApiError::internal)?;
    st.sessions
        .lock()
        .expect("sessions lock")
        .insert(id.clone(), Arc::new(Mutex::new(session)));
    Ok((
        StatusCode::CREATED,
        Json(json!({ "session_id": id, "params": record.params, "params_source": source })),
    )
        .into_response())
}

async fn get_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let s = st.session(&id)?;
    let s = s.lock().expect("session lock");
    Ok(Json(json!({
        "record": s.record,
        "finetuned": s.finetuned.is_some(),
        "active_job": s.active_job,
        "source_png_base64": png_base64(&s.image)?,
    })))
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FinetuneBody {
    iterations: Option<usize>,
    seed: Option<u64>,
}

struct JobObserver {
    state: Arc<AppState>,
    job: String,
    total: usize,
}

impl TrainObserver for JobObserver {
    fn on_log(&mut self, line: &TrainLogLine) {
        if let Some(j) = self.state.jobs.lock().expect("jobs lock").get_mut(&self.job) {
            j.progress = (line.iteration as f64 / self.total.max(1) as f64).min(1.0);
        }
    }
}

fn set_job(st: &AppState, id: &str, f: impl FnOnce(&mut JobStatus)) {
    if let Some(j) = st.jobs.lock().expect("jobs lock").get_mut(id) {
        f(j);
    }
}

async fn start_finetune(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let body: FinetuneBody = parse_body(&body)?;
    let session = st.session(&id)?;
    let job_id = {
        let mut s = session.lock().expect("session lock");
        if let Some(j) = &s.active_job {
            return Err(ApiError::conflict(format!("fine-tune job {j} already active on session {id}")));
        }
        let job_id = st.next_id('j');
        s.active_job = Some(job_id.clone());
        job_id
    };
    st.jobs.lock().expect("jobs lock").insert(
        job_id.clone(),
        JobStatus {
            id: job_id.clone(),
            session_id: id.clone(),
            state: JobState::Queued,
            progress: 0.0,
            error: None,
        },
    );
    let mut cfg: TrainConfig = st.config.finetune.clone();
    if let Some(n) = body.iterations {
        cfg.iterations = n;
    }
    if let Some(seed) = body.seed {
        cfg.seed = seed;
    }
    cfg.log_every = (cfg.iterations / 50).max(1);
    let (st2, job2, session2) = (st.clone(), job_id.clone(), session.clone());
    tokio::task::spawn_blocking(move || {
        set_job(&st2, &job2, |j| j.state = JobState::Running);
        let result = run_finetune(&st2, &session2, &cfg, &job2);
        let mut s = session2.lock().expect("session lock");
        s.active_job = None;
        match result {
            Ok(()) => set_job(&st2, &job2, |j| {
                j.state = JobState::Done;
                j.progress = 1.0;
            }),
            Err(e) => set_job(&st2, &job2, |j| {
                j.state = JobState::Failed;
                j.error = Some(e);
            }),
        }
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job_id }))).into_response())
}

fn run_finetune(st: &Arc<AppState>, session: &Arc<Mutex<Session>>, cfg: &TrainConfig, job: &str) -> Result<(), String> {
    let (image, params, sid) = {
        let s = session.lock().expect("session lock");
        (s.image.clone(), s.record.params.clone(), s.record.id.clone())
    };
    let sample = TrainSample {
        image: Tensor::from(&image),
        snapshots: snapshot_tensor(&st.model, &params, image.height).map_err(|e| e.to_string())?,
    };
    let sched = st.base.schedule.build().map_err(|e| e.to_string())?;
    let mut obs = JobObserver {
        state: st.clone(),
        job: job.to_string(),
        total: cfg.iterations,
    };
    let out = finetune_one_shot(&sample, &st.base, cfg, &sched, &mut obs).map_err(|e| e.to_string())?;
    let digest = st.store.save_finetuned(&sid, &out.bundle)?;
    let mut s = session.lock().expect("session lock");
    s.record.finetuned_digest = Some(digest.unwrap_or_else(|| out.bundle.checksum()));
    s.finetuned = Some(Arc::new(out.bundle));
    st.store.save_record(&s)
}

async fn get_job(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<JobStatus>> {
    st.jobs
        .lock()
        .expect("jobs lock")
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("unknown job {id}")))
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EditBody {
    #[serde(default)]
    pub overrides: ParamOverrides,
    #[serde(default)]
    pub drive_params: Option<FaceParams>,
    #[serde(default)]
    pub strategy: Option<MaskStrategy>,
    #[serde(default)]
    pub t_inf: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Use the session's fine-tuned weights when present.
    #[serde(default = "default_true")]
    pub use_finetuned: bool,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct InpaintBody {
    #[serde(default)]
    pub region: Option<Rect>,
    /// Row-major, true for missing pixels.
    #[serde(default)]
    pub mask: Option<Vec<bool>>,
    #[serde(default)]
    pub strategy: Option<MaskStrategy>,
    #[serde(default)]
    pub t_inf: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fit_budget: Option<usize>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ManipulateBody {
    pub direction: String,
    pub scale: f32,
    #[serde(default)]
    pub strategy: Option<MaskStrategy>,
    #[serde(default)]
    pub t_inf: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub use_finetuned: bool,
}

/// Weights, image and parameters for one request, taken under the session
/// lock; fails while a fine-tune job runs.
fn snapshot_session(st: &AppState, session: &Arc<Mutex<Session>>, use_finetuned: bool) -> ApiResult<(Arc<ModelBundle>, bool, Image, FaceParams)> {
    let s = session.lock().expect("session lock");
    if let Some(j) = &s.active_job {
        return Err(ApiError::conflict(format!("session is busy with fine-tune job {j}")));
    }
    let (bundle, tuned) = match (&s.finetuned, use_finetuned) {
        (Some(b), true) => (b.clone(), true),
        _ => (st.base.clone(), false),
    };
    Ok((bundle, tuned, s.image.clone(), s.record.params.clone()))
}

/// Runs one history-producing request. Shared by the endpoints and replay.
pub fn execute(
    st: &AppState,
    bundle: &ModelBundle,
    image: &Image,
    params: &FaceParams,
    kind: HistoryKind,
    request: &serde_json::Value,
) -> ApiResult<(Image, Option<EditTrace>, Option<FaceParams>)> {
    let t_default = st.config.edit.t_inf;
    let s_default = st.config.edit.strategy;
    match kind {
        HistoryKind::Edit => {
            let b: EditBody = parse_body(&serde_json::to_vec(request).expect("json"))?;
            let req = EditRequest {
                overrides: b.overrides,
                drive_params: b.drive_params,
                strategy: b.strategy.unwrap_or(s_default),
                t_inf: b.t_inf.unwrap_or(t_default),
                noise_seed: b.seed,
                ..EditRequest::new(params.clone())
            };
            let (out, trace) = edit(bundle, &st.model, image, &req)?;
            Ok((out, Some(trace), None))
        }
        HistoryKind::Inpaint => {
            let b: InpaintBody = parse_body(&serde_json::to_vec(request).expect("json"))?;
            let (h, w) = (image.height, image.width);
            let mask = match (b.mask, b.region) {
                (Some(m), None) => m,
                (None, Some(r)) => {
                    if r.x + r.w > w || r.y + r.h > h {
                        return Err(ApiError {
                            path: Some("region".into()),
                            ..ApiError::bad("region extends past the image")
                        });
                    }
                    (0..h * w)
                        .map(|p| {
                            let (row, col) = (p / w, p % w);
                            (r.y..r.y + r.h).contains(&row) && (r.x..r.x + r.w).contains(&col)
                        })
                        .collect()
                }
                _ => return Err(ApiError::bad("give exactly one of `mask` or `region`")),
            };
            let opts = InpaintOptions {
                strategy: b.strategy.unwrap_or(s_default),
                t_inf: b.t_inf.unwrap_or(t_default),
                noise_seed: b.seed,
                fit_budget: b.fit_budget.unwrap_or(st.config.edit.inpaint_fit_budget),
                fit_seed: b.seed,
                params: None,
            };
            let r = inpaint(bundle, &st.model, image, &mask, &opts)?;
            Ok((r.image, Some(r.trace), Some(r.params)))
        }
        HistoryKind::Manipulate => {
            let b: ManipulateBody = parse_body(&serde_json::to_vec(request).expect("json"))?;
            let d = st.directions.get(&b.direction).ok_or_else(|| ApiError {
                path: Some("direction".into()),
                ..ApiError::bad(format!(
                    "unknown direction {:?}; available: {:?}",
                    b.direction,
                    st.directions.keys().collect::<Vec<_>>()
                ))
            })?;
            let shift = (b.scale != 0.0).then(|| d.iter().map(|v| v * b.scale).collect());
            let req = EditRequest {
                strategy: b.strategy.unwrap_or(s_default),
                t_inf: b.t_inf.unwrap_or(t_default),
                noise_seed: b.seed,
                semantic_shift: shift,
                ..EditRequest::new(params.clone())
            };
            let (out, trace) = edit(bundle, &st.model, image, &req)?;
            Ok((out, Some(trace), None))
        }
    }
}

fn use_finetuned_flag(kind: HistoryKind, request: &serde_json::Value) -> bool {
    kind != HistoryKind::Inpaint && request.get("use_finetuned").and_then(|v| v.as_bool()).unwrap_or(true)
}

async fn history_request(st: Arc<AppState>, id: String, kind: HistoryKind, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let request: serde_json::Value = parse_body(&body)?;
    // validate the shape before queuing work
    match kind {
        HistoryKind::Edit => drop(parse_body::<EditBody>(&body)?),
        HistoryKind::Inpaint => drop(parse_body::<InpaintBody>(&body)?),
        HistoryKind::Manipulate => drop(parse_body::<ManipulateBody>(&body)?),
    }
    let session = st.session(&id)?;
    let (bundle, tuned, image, params) = snapshot_session(&st, &session, use_finetuned_flag(kind, &request))?;
    let (st2, req2) = (st.clone(), request.clone());
    let (out, trace, fitted) = blocking(move || execute(&st2, &bundle, &image, &params, kind, &req2)).await?;
    let digest = image_digest(&out);
    let mut s = session.lock().expect("session lock");
    let name = format!("outputs/{:04}.png", s.record.history.len());
    st.store.save_output(&id, &name, &out).map_err(ApiError::internal)?;
    s.record.history.push(HistoryEntry {
        kind,
        request,
        finetuned: tuned,
        output: name.clone(),
        image_digest: digest.clone(),
    });
    s.outputs.push(out.clone());
    st.store.save_record(&s).map_err(ApiError::internal)?;
    Ok(Json(json!({
        "image_png_base64": png_base64(&out)?,
        "image_digest": digest,
        "output_ref": name,
        "finetuned": tuned,
        "trace": trace,
        "fitted_params": fitted,
    })))
}

async fn edit_session(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    history_request(st, id, HistoryKind::Edit, body).await
}

async fn inpaint_session(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    history_request(st, id, HistoryKind::Inpaint, body).await
}

async fn manipulate_session(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    history_request(st, id, HistoryKind::Manipulate, body).await
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PreviewQuery {
    yaw: Option<f64>,
    pitch: Option<f64>,
    roll: Option<f64>,
    jaw: Option<f64>,
    /// Comma-separated.
    psi: Option<String>,
    /// Comma-separated, nine values.
    light: Option<String>,
}

fn parse_list(name: &str, s: &str) -> ApiResult<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim().parse::<f64>().map_err(|e| ApiError {
                path: Some(name.into()),
                ..ApiError::bad(format!("{v:?}: {e}"))
            })
        })
        .collect()
}

async fn snapshot_preview(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<PreviewQuery>,
) -> ApiResult<Json<serde_json::Value>> {
    let session = st.session(&id)?;
    let mut p = session.lock().expect("session lock").record.params.clone();
    for (i, v) in [q.yaw, q.pitch, q.roll].into_iter().enumerate() {
        if let Some(v) = v {
            p.theta_global[i] = v;
        }
    }
    if let Some(j) = q.jaw {
        p.theta_jaw = j;
    }
    if let Some(s) = &q.psi {
        let v = parse_list("psi", s)?;
        if v.len() != p.psi.len() {
            return Err(ApiError::bad(format!("psi needs {} values", p.psi.len())));
        }
        p.psi = v;
    }
    if let Some(s) = &q.light {
        let v = parse_list("light", s)?;
        p.light = v
            .try_into()
            .map_err(|_| ApiError::bad("light needs 9 values"))?;
    }
    let size = st.base.config.image_size;
    let snap = render_snapshots(&st.model, &p, size, size)?;
    let to_image = |hwc: &[f32], normal: bool| -> facectl_core::Result<Image> {
        let hw = size * size;
        let mut data = vec![0.0f32; 3 * hw];
        for pix in 0..hw {
            for c in 0..3 {
                let v = hwc[3 * pix + c];
                // map [-1, 1] normals and [0, 1] shading to the image range
                data[c * hw + pix] = if normal { v } else { 2.0 * v - 1.0 };
            }
        }
        Image::new(size, size, data)
    };
    Ok(Json(json!({
        "normal_png_base64": png_base64(&to_image(&snap.normal_map, true)?)?,
        "shading_png_base64": png_base64(&to_image(&snap.shading_map, false)?)?,
        "params": p,
    })))
}

/// Re-executes a session's history and returns the positions whose digest
/// differs from the recorded one.
pub fn replay_history(st: &AppState, session: &Session) -> ApiResult<Vec<usize>> {
    let mut bad = Vec::new();
    for (k, h) in session.record.history.iter().enumerate() {
        let bundle: &ModelBundle = match (h.finetuned, &session.finetuned) {
            (true, Some(b)) => b,
            (true, None) => return Err(ApiError::conflict("history uses fine-tuned weights that are missing")),
            (false, _) => &st.base,
        };
        let (out, _, _) = execute(st, bundle, &session.image, &session.record.params, h.kind, &h.request)?;
        if image_digest(&out) != h.image_digest {
            bad.push(k);
        }
    }
    Ok(bad)
}

impl AppState {
    /// Runs [`replay_history`] for one session id.
    pub fn replay(&self, id: &str) -> ApiResult<Vec<usize>> {
        let s = self.session(id)?;
        let s = s.lock().expect("session lock");
        replay_history(self, &s)
    }
}

pub async fn serve(state: Arc<AppState>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
