//! Session-scoped HTTP API under `/api/v1/`.
//!
//! Each session owns a directory (see [`crate::store`]). Mutations of one
//! session serialize through its async lock; training and fine-tuning run on
//! the blocking pool and occupy the session's single job slot. Reads use the
//! published round snapshot, which is swapped only after the new round has
//! been made durable on disk.

use std::collections::{BTreeMap, HashMap};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use rand::Rng;
use refocus_core::annotation::{heatmap_to_polygons, rasterize, PolygonAnnotation};
use refocus_core::dataset::{
    compute_cooccurrence, compute_label_stats, split_dataset, CoOccurrenceMatrix, DatasetManifest, LabelStats, Split,
};
use refocus_core::explain::{grad_cam, render_overlay, Heatmap};
use refocus_core::loss::{dynamic_weights, LabelMask, LossWeights};
use refocus_core::metrics::{report, MetricsReport};
use refocus_core::nn::{build_model, ModelConfig, MultiLabelModel, PredictionVector};
use refocus_core::ranking::{
    accuracy_deviation_score, concentration_score, image_dependency_score, rank_images, RankingMode, RankingScore,
};
use refocus_core::train::{finetune_round, predict_all, replay_indices, train, EpochReport, Sample, TrainingParams};
use refocus_core::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::ingest;
use crate::store::{Checkpoint, RoundRecord, SessionInfo, SessionState, SessionStore};

/// Deliberate failures for exercising crash safety.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// The next fine-tune job dies after this many epochs.
    KillFinetuneAtEpoch(usize),
    /// The next fine-tune job dies after writing its checkpoint file but
    /// before publishing the round.
    CrashBeforePublish,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Idle,
    Running,
    Failed,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Train,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: Option<String>,
    pub kind: Option<JobKind>,
    pub state: JobState,
    pub progress: f64,
    pub message: Option<String>,
    /// Round published by a finished job.
    pub round: Option<u32>,
}

impl JobStatus {
    fn idle() -> Self {
        Self {
            job_id: None,
            kind: None,
            state: JobState::Idle,
            progress: 0.0,
            message: None,
            round: None,
        }
    }
}

struct SessionData {
    manifest: DatasetManifest,
    images: Vec<Tensor>,
    stats: LabelStats,
    cooccurrence: CoOccurrenceMatrix,
}

/// A published round: its model plus lazily computed per-item predictions.
struct RoundSnapshot {
    round: u32,
    model: MultiLabelModel,
    predictions: OnceLock<Vec<PredictionVector>>,
}

impl RoundSnapshot {
    fn new(round: u32, model: MultiLabelModel) -> Self {
        Self {
            round,
            model,
            predictions: OnceLock::new(),
        }
    }

    fn predictions(&self, data: &SessionData) -> Result<&[PredictionVector]> {
        if let Some(p) = self.predictions.get() {
            return Ok(p);
        }
        let images: Vec<&Tensor> = data.images.iter().collect();
        let p = predict_all(&self.model, &images)?;
        Ok(self.predictions.get_or_init(|| p))
    }
}

struct Session {
    id: String,
    store: SessionStore,
    /// Serializes mutations of this session.
    lock: tokio::sync::Mutex<()>,
    data: RwLock<Option<Arc<SessionData>>>,
    snapshot: RwLock<Option<Arc<RoundSnapshot>>>,
    state: RwLock<SessionState>,
    job: Mutex<JobStatus>,
}

impl Session {
    fn data(&self) -> Result<Arc<SessionData>> {
        self.data
            .read()
            .expect("lock")
            .clone()
            .ok_or_else(|| Error::Rejected("no dataset has been uploaded to this session".into()))
    }

    fn snapshot(&self) -> Result<Arc<RoundSnapshot>> {
        self.snapshot
            .read()
            .expect("lock")
            .clone()
            .ok_or_else(|| Error::Rejected("no trained model yet; start training first".into()))
    }

    fn current_round(&self) -> Option<u32> {
        self.state.read().expect("lock").current_round
    }

    fn recorded(&self, request_id: Option<&str>) -> Option<Value> {
        let id = request_id?;
        self.state.read().expect("lock").requests.get(id).cloned()
    }

    /// Persists `response` under `request_id` together with any state change
    /// made by `edit`.
    fn commit(&self, request_id: Option<&str>, response: &Value, edit: impl FnOnce(&mut SessionState)) -> Result<()> {
        let mut next = self.state.read().expect("lock").clone();
        edit(&mut next);
        if let Some(id) = request_id {
            next.requests.insert(id.to_string(), response.clone());
        }
        self.store.save_state(&next)?;
        *self.state.write().expect("lock") = next;
        Ok(())
    }

    fn load(id: String, store: SessionStore) -> Result<Self> {
        let state = store.load_state()?;
        let info = store.load_info()?;
        let data = match (store.load_manifest()?, info.as_ref().and_then(|i| i.image_size)) {
            (Some(manifest), Some(size)) => {
                let images = ingest::load_images(&manifest, size)?;
                Some(Arc::new(session_data(manifest, images)?))
            }
            _ => None,
        };
        // Only the round named by state.json is visible; later checkpoint
        // files are leftovers of jobs that never published.
        let snapshot = match state.current_round {
            Some(r) => {
                let record = state
                    .rounds
                    .iter()
                    .find(|x| x.round_index == r)
                    .ok_or_else(|| Error::NotFound(format!("round record {r}")))?;
                let ckpt = store.load_checkpoint(&record.checkpoint)?;
                Some(Arc::new(RoundSnapshot::new(r, MultiLabelModel::from_snapshot(ckpt.snapshot)?)))
            }
            None => None,
        };
        Ok(Self {
            id,
            store,
            lock: tokio::sync::Mutex::new(()),
            data: RwLock::new(data),
            snapshot: RwLock::new(snapshot),
            state: RwLock::new(state),
            job: Mutex::new(JobStatus::idle()),
        })
    }
}

fn session_data(manifest: DatasetManifest, images: Vec<Tensor>) -> Result<SessionData> {
    let stats = compute_label_stats(&manifest)?;
    let cooccurrence = compute_cooccurrence(&manifest)?;
    Ok(SessionData {
        manifest,
        images,
        stats,
        cooccurrence,
    })
}

/// Shared service state.
pub struct AppState {
    config: Config,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    create_lock: tokio::sync::Mutex<()>,
    fault: Mutex<Option<Fault>>,
}

impl AppState {
    /// Opens the data directory and reloads every persisted session.
    pub fn open(config: Config) -> Result<Arc<Self>> {
        let dir = config.data_dir.join("sessions");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut sessions = HashMap::new();
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let store = SessionStore::new(&path);
            if let Some(info) = store.load_info()? {
                let s = Session::load(info.session_id.clone(), store)?;
                sessions.insert(info.session_id, Arc::new(s));
            }
        }
        Ok(Arc::new(Self {
            config,
            sessions: RwLock::new(sessions),
            create_lock: tokio::sync::Mutex::new(()),
            fault: Mutex::new(None),
        }))
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    /// Arms a one-shot fault for the next fine-tune job.
    pub fn inject_fault(&self, fault: Fault) {
        *self.fault.lock().expect("lock") = Some(fault);
    }

    fn take_fault(&self) -> Option<Fault> {
        self.fault.lock().expect("lock").take()
    }

    fn session(&self, id: &str) -> Result<Arc<Session>> {
        self.sessions
            .read()
            .expect("lock")
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("session {id}")))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/v1/sessions", post(create_session))
        .route("/api/v1/sessions/{sid}", get(get_session))
        .route("/api/v1/sessions/{sid}/dataset", post(upload_dataset))
        .route("/api/v1/sessions/{sid}/label-stats", get(get_label_stats))
        .route("/api/v1/sessions/{sid}/cooccurrence", get(get_cooccurrence))
        .route("/api/v1/sessions/{sid}/train", post(start_training))
        .route("/api/v1/sessions/{sid}/job", get(get_job_status))
        .route("/api/v1/sessions/{sid}/ranked-images", get(list_ranked_images))
        .route("/api/v1/sessions/{sid}/heatmap", get(get_heatmap))
        .route("/api/v1/sessions/{sid}/heatmap/overlay", get(get_heatmap_overlay))
        .route("/api/v1/sessions/{sid}/annotations", put(put_annotation).get(list_annotations))
        .route("/api/v1/sessions/{sid}/accept-heatmap", post(accept_heatmap))
        .route("/api/v1/sessions/{sid}/finetune", post(start_finetune))
        .route("/api/v1/sessions/{sid}/history", get(get_round_history))
        .route("/api/v1/sessions/{sid}/comparison", get(get_comparison))
        .with_state(state)
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

impl From<refocus_core::Error> for ApiError {
    fn from(e: refocus_core::Error) -> Self {
        Self(Error::Core(e))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Conflict(_) => StatusCode::CONFLICT,
            Error::Rejected(_) | Error::Config(_) => StatusCode::BAD_REQUEST,
            Error::Core(_) | Error::LabelFile { .. } | Error::Image { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Io { .. } | Error::Json { .. } | Error::JobFailed(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| Error::JobFailed(e.to_string()))?
}

fn new_id(prefix: &str) -> String {
    format!("{prefix}-{:016x}", rand::rng().random::<u64>())
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
pub struct CreateSession {
    pub request_id: Option<String>,
}

async fn create_session(State(app): State<Arc<AppState>>, body: Option<Json<CreateSession>>) -> ApiResult<impl IntoResponse> {
    let req = body.map(|b| b.0).unwrap_or_default();
    let _guard = app.create_lock.lock().await;
    if let Some(rid) = &req.request_id {
        let existing = app.sessions.read().expect("lock").values().find_map(|s| {
            let info = s.store.load_info().ok().flatten()?;
            (info.request_id.as_deref() == Some(rid)).then(|| s.id.clone())
        });
        if let Some(id) = existing {
            return Ok((StatusCode::OK, Json(json!({ "session_id": id }))));
        }
    }
    let id = new_id("s");
    let store = SessionStore::new(app.config.data_dir.join("sessions").join(&id));
    store.save_info(&SessionInfo {
        session_id: id.clone(),
        request_id: req.request_id,
        dataset_root: None,
        labels_file: None,
        image_size: None,
    })?;
    let session = Session::load(id.clone(), store)?;
    app.sessions.write().expect("lock").insert(id.clone(), Arc::new(session));
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id }))))
}

async fn get_session(State(app): State<Arc<AppState>>, UrlPath(sid): UrlPath<String>) -> ApiResult<Json<Value>> {
    let s = app.session(&sid)?;
    let state = s.state.read().expect("lock").clone();
    let data = s.data.read().expect("lock").clone();
    Ok(Json(json!({
        "session_id": s.id,
        "dataset": data.map(|d| json!({
            "dataset_id": d.manifest.dataset_id,
            "label_names": d.manifest.label_names,
            "items": d.manifest.len(),
            "split_sizes": d.manifest.split_sizes(),
        })),
        "current_round": state.current_round,
        "lineage": state.rounds.iter().map(|r| json!({
            "round_index": r.round_index,
            "parent_round": r.parent_round,
            "checkpoint": r.checkpoint,
        })).collect::<Vec<_>>(),
        "job": s.job.lock().expect("lock").clone(),
    })))
}

#[derive(Debug, Deserialize)]
pub struct UploadDataset {
    pub root: PathBuf,
    pub labels_file: PathBuf,
    pub image_size: Option<usize>,
    pub ratios: Option<(f64, f64, f64)>,
    pub seed: Option<u64>,
    pub request_id: Option<String>,
}

async fn upload_dataset(
    State(app): State<Arc<AppState>>,
    UrlPath(sid): UrlPath<String>,
    Json(req): Json<UploadDataset>,
) -> ApiResult<Json<Value>> {
    let s = app.session(&sid)?;
    let _guard = s.lock.lock().await;
    if let Some(v) = s.recorded(req.request_id.as_deref()) {
        return Ok(Json(v));
    }
    if s.current_round().is_some() {
        return Err(Error::Conflict("the session already has a trained model".into()).into());
    }
    let size = req.image_size.unwrap_or(app.config.image_size);
    let ratios = req.ratios.unwrap_or(app.config.split_ratios);
    let seed = req.seed.unwrap_or(app.config.split_seed);
    let labels_file = if req.labels_file.is_absolute() {
        req.labels_file.clone()
    } else {
        req.root.join(&req.labels_file)
    };
    let root = req.root.clone();
    let loaded = blocking(move || ingest::load_dataset(&root, &labels_file, size)).await?;
    let manifest = split_dataset(&loaded.manifest, ratios, seed)?;
    s.store.save_manifest(&manifest)?;
    let mut info = s.store.load_info()?.unwrap_or(SessionInfo {
        session_id: s.id.clone(),
        request_id: None,
        dataset_root: None,
        labels_file: None,
        image_size: None,
    });
    info.dataset_root = Some(req.root.clone());
    info.labels_file = Some(req.labels_file.clone());
    info.image_size = Some(size);
    s.store.save_info(&info)?;
    let response = json!({
        "dataset_id": manifest.dataset_id,
        "label_names": manifest.label_names,
        "items": manifest.len(),
        "split_sizes": manifest.split_sizes(),
        "seed": manifest.seed,
    });
    *s.data.write().expect("lock") = Some(Arc::new(session_data(manifest, loaded.images)?));
    s.commit(req.request_id.as_deref(), &response, |_| {})?;
    Ok(Json(response))
}

async fn get_label_stats(State(app): State<Arc<AppState>>, UrlPath(sid): UrlPath<String>) -> ApiResult<Json<Value>> {
    let d = app.session(&sid)?.data()?;
    Ok(Json(json!({
        "label_names": d.manifest.label_names,
        "counts": d.stats.counts,
        "proportions": d.stats.proportions,
        "total": d.stats.total,
    })))
}

async fn get_cooccurrence(State(app): State<Arc<AppState>>, UrlPath(sid): UrlPath<String>) -> ApiResult<Json<Value>> {
    let d = app.session(&sid)?.data()?;
    Ok(Json(json!({
        "label_names": d.manifest.label_names,
        "matrix": d.cooccurrence.to_rows(),
    })))
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
pub struct StartJob {
    pub request_id: Option<String>,
    pub params: Option<TrainingParams>,
}

/// Claims the job slot or fails with a conflict.
fn claim_job(s: &Session, kind: JobKind) -> Result<String> {
    let mut job = s.job.lock().expect("lock");
    if job.state == JobState::Running {
        return Err(Error::Conflict(format!(
            "job {} is still running",
            job.job_id.as_deref().unwrap_or("?")
        )));
    }
    let id = new_id("job");
    *job = JobStatus {
        job_id: Some(id.clone()),
        kind: Some(kind),
        state: JobState::Running,
        progress: 0.0,
        message: None,
        round: None,
    };
    Ok(id)
}

fn finish_job(s: &Session, result: &Result<u32>) {
    let mut job = s.job.lock().expect("lock");
    match result {
        Ok(round) => {
            job.state = JobState::Done;
            job.progress = 1.0;
            job.round = Some(*round);
            job.message = None;
        }
        Err(e) => {
            job.state = JobState::Failed;
            job.message = Some(e.to_string());
        }
    }
}

fn progress_sink<'a>(s: &'a Session, kill_at: Option<usize>) -> impl FnMut(&EpochReport) -> ControlFlow<()> + 'a {
    move |r: &EpochReport| {
        s.job.lock().expect("lock").progress = r.epoch as f64 / r.epochs as f64;
        if kill_at.is_some_and(|k| r.epoch >= k) {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    }
}

async fn start_training(
    State(app): State<Arc<AppState>>,
    UrlPath(sid): UrlPath<String>,
    body: Option<Json<StartJob>>,
) -> ApiResult<impl IntoResponse> {
    let req = body.map(|b| b.0).unwrap_or_default();
    let s = app.session(&sid)?;
    let _guard = s.lock.lock().await;
    if let Some(v) = s.recorded(req.request_id.as_deref()) {
        return Ok((StatusCode::OK, Json(v)));
    }
    let data = s.data()?;
    if s.current_round().is_some() {
        return Err(Error::Conflict("round 0 already exists; use fine-tuning for further rounds".into()).into());
    }
    let params = req.params.unwrap_or_else(|| app.config.training.clone());
    params.validate()?;
    let job_id = claim_job(&s, JobKind::Train)?;
    let response = json!({ "job_id": job_id, "kind": "train" });
    s.commit(req.request_id.as_deref(), &response, |_| {})?;
    let app2 = app.clone();
    let s2 = s.clone();
    tokio::task::spawn_blocking(move || {
        let result = run_training(&app2, &s2, &data, &params);
        finish_job(&s2, &result);
    });
    Ok((StatusCode::ACCEPTED, Json(response)))
}

fn samples(data: &SessionData, indices: &[usize]) -> Vec<Sample> {
    indices
        .iter()
        .map(|&i| Sample::new(data.images[i].clone(), data.manifest.items[i].truth()))
        .collect()
}

/// Test-split metrics for every label.
fn evaluate_all(data: &SessionData, model: &MultiLabelModel, threshold: f64) -> Result<Vec<MetricsReport>> {
    let test = data.manifest.indices(Split::Test);
    let images: Vec<&Tensor> = test.iter().map(|&i| &data.images[i]).collect();
    let preds = predict_all(model, &images)?;
    let truths: Vec<Vec<u8>> = test.iter().map(|&i| data.manifest.items[i].labels.clone()).collect();
    (0..data.manifest.num_labels())
        .map(|c| Ok(report(&preds, &truths, c, model.round_index(), threshold)?))
        .collect()
}

fn run_training(app: &AppState, s: &Session, data: &SessionData, params: &TrainingParams) -> Result<u32> {
    let k = data.manifest.num_labels();
    let size = data.images.first().map(Tensor::height).ok_or(Error::Core(refocus_core::Error::EmptyDataset))?;
    let config = ModelConfig::new(app.config.backbone, k, size);
    let model = build_model(&config, params.seed)?;
    let train_set = samples(data, &data.manifest.indices(Split::Train));
    let weights = LossWeights::uniform(k, app.config.base_weight);
    let out = train(&model, &train_set, &weights, params, progress_sink(s, None))?;
    let record = RoundRecord {
        round_index: 0,
        parent_round: None,
        annotated_items: Vec::new(),
        weights: None,
        params: params.clone(),
        checkpoint: SessionStore::checkpoint_name(0),
        epoch_losses: out.epoch_losses(),
    };
    publish(app, s, data, out.model, record, false)
}

/// Makes a finished round durable, then visible. The checkpoint file is
/// written first; the round exists only once `state.json` names it.
fn publish(
    app: &AppState,
    s: &Session,
    data: &SessionData,
    model: MultiLabelModel,
    record: RoundRecord,
    crash_before_publish: bool,
) -> Result<u32> {
    let reports = evaluate_all(data, &model, app.config.prediction_threshold)?;
    let round = record.round_index;
    s.store.save_checkpoint(&Checkpoint {
        round_index: round,
        parent: record.parent_round,
        params: record.params.clone(),
        snapshot: model.snapshot(),
    })?;
    if crash_before_publish {
        return Err(Error::JobFailed("injected crash before publication".into()));
    }
    let _guard = s.lock.blocking_lock();
    let mut next = s.state.read().expect("lock").clone();
    next.current_round = Some(round);
    next.rounds.push(record);
    for r in reports {
        next.history.push(r)?;
    }
    s.store.save_state(&next)?;
    *s.snapshot.write().expect("lock") = Some(Arc::new(RoundSnapshot::new(round, model)));
    *s.state.write().expect("lock") = next;
    Ok(round)
}

async fn get_job_status(State(app): State<Arc<AppState>>, UrlPath(sid): UrlPath<String>) -> ApiResult<Json<JobStatus>> {
    let s = app.session(&sid)?;
    let job = s.job.lock().expect("lock").clone();
    Ok(Json(job))
}

#[derive(Debug, Deserialize)]
pub struct RankQuery {
    pub label: String,
    pub mode: String,
}

fn resolve_label(manifest: &DatasetManifest, label: &str) -> Result<usize> {
    if let Ok(i) = label.parse::<usize>() {
        if i < manifest.num_labels() {
            return Ok(i);
        }
    }
    manifest
        .label_index(label)
        .ok_or_else(|| Error::NotFound(format!("label {label}")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedImage {
    #[serde(flatten)]
    pub score: RankingScore,
    pub probability: f64,
    pub truth: u8,
    pub annotated: bool,
}

async fn list_ranked_images(
    State(app): State<Arc<AppState>>,
    UrlPath(sid): UrlPath<String>,
    Query(q): Query<RankQuery>,
) -> ApiResult<Json<Vec<RankedImage>>> {
    let s = app.session(&sid)?;
    let data = s.data()?;
    let snap = s.snapshot()?;
    let label = resolve_label(&data.manifest, &q.label)?;
    let mode = RankingMode::parse(&q.mode)?;
    let annotated: Vec<String> = s
        .store
        .load_annotations()?
        .into_iter()
        .filter(|a| a.label_index == label)
        .map(|a| a.image_id)
        .collect();
    let top_fraction = app.config.top_fraction;
    let tau = app.config.dependency_threshold;
    let out = blocking(move || {
        let preds = snap.predictions(&data)?;
        let val = data.manifest.indices(Split::Val);
        let mut scores = Vec::with_capacity(val.len());
        for &i in &val {
            let item = &data.manifest.items[i];
            let score = match mode {
                RankingMode::Accuracy => accuracy_deviation_score(&preds[i], &item.labels, label)?,
                RankingMode::Concentration => {
                    let h = grad_cam(&snap.model, &data.images[i], label)?;
                    concentration_score(&h, top_fraction)?
                }
                RankingMode::Dependency => image_dependency_score(&data.cooccurrence, item, label, tau)?,
            };
            scores.push(RankingScore {
                image_id: item.image_id.clone(),
                label_index: label,
                mode,
                score,
                rank: 0,
            });
        }
        let ranked = rank_images(scores, mode)?;
        Ok(ranked
            .into_iter()
            .map(|score| {
                let (i, item) = data.manifest.item(&score.image_id).expect("ranked id exists");
                RankedImage {
                    probability: preds[i].probabilities[label],
                    truth: item.labels[label],
                    annotated: annotated.contains(&score.image_id),
                    score,
                }
            })
            .collect())
    })
    .await?;
    Ok(Json(out))
}

#[derive(Debug, Deserialize)]
pub struct HeatmapQuery {
    pub image: String,
    pub label: String,
    pub round: Option<u32>,
}

/// Model of a published round: the live snapshot or a stored checkpoint.
fn round_model(s: &Session, round: Option<u32>) -> Result<Arc<RoundSnapshot>> {
    let snap = s.snapshot()?;
    let round = round.unwrap_or(snap.round);
    if round == snap.round {
        return Ok(snap);
    }
    let state = s.state.read().expect("lock").clone();
    let record = state
        .rounds
        .iter()
        .find(|r| r.round_index == round)
        .ok_or_else(|| Error::NotFound(format!("round {round}")))?;
    let ckpt = s.store.load_checkpoint(&record.checkpoint)?;
    Ok(Arc::new(RoundSnapshot::new(round, MultiLabelModel::from_snapshot(ckpt.snapshot)?)))
}

/// Heatmap for one (image, label, round), cached on disk with its overlay.
fn heatmap_for(s: &Session, data: &SessionData, snap: &RoundSnapshot, index: usize, label: usize) -> Result<Heatmap> {
    let item = &data.manifest.items[index];
    if let Some(values) = s.store.load_heatmap(snap.round, &item.image_id, label)? {
        let degenerate = values.max_value() <= 0.0;
        return Ok(Heatmap {
            image_id: item.image_id.clone(),
            label_index: label,
            round_index: snap.round,
            raw: values.clone(),
            values,
            degenerate,
        });
    }
    let h = grad_cam(&snap.model, &data.images[index], label)?.with_image_id(item.image_id.clone());
    let image = &data.images[index];
    let overlay = render_overlay(image, &h, (image.height(), image.width()))?;
    let png = s.store.overlay_path(snap.round, &item.image_id, label);
    if let Some(dir) = png.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    ingest::save_png(&overlay, &png)?;
    s.store.save_heatmap(snap.round, &item.image_id, label, &h.values)?;
    Ok(h)
}

fn locate(data: &SessionData, image: &str, label: &str) -> Result<(usize, usize)> {
    let (i, _) = data
        .manifest
        .item(image)
        .ok_or_else(|| Error::NotFound(format!("image {image}")))?;
    Ok((i, resolve_label(&data.manifest, label)?))
}

async fn get_heatmap(
    State(app): State<Arc<AppState>>,
    UrlPath(sid): UrlPath<String>,
    Query(q): Query<HeatmapQuery>,
) -> ApiResult<Json<Value>> {
    let s = app.session(&sid)?;
    let data = s.data()?;
    let (index, label) = locate(&data, &q.image, &q.label)?;
    let snap = round_model(&s, q.round)?;
    let h = blocking(move || heatmap_for(&s, &data, &snap, index, label)).await?;
    Ok(Json(json!({
        "image_id": h.image_id,
        "label_index": h.label_index,
        "round_index": h.round_index,
        "rows": h.values.rows(),
        "cols": h.values.cols(),
        "values": h.values.to_rows(),
        "degenerate": h.degenerate,
    })))
}

async fn get_heatmap_overlay(
    State(app): State<Arc<AppState>>,
    UrlPath(sid): UrlPath<String>,
    Query(q): Query<HeatmapQuery>,
) -> ApiResult<Response> {
    let s = app.session(&sid)?;
    let data = s.data()?;
    let (index, label) = locate(&data, &q.image, &q.label)?;
    let snap = round_model(&s, q.round)?;
    let round = snap.round;
    let s2 = s.clone();
    blocking(move || heatmap_for(&s2, &data, &snap, index, label).map(|_| ())).await?;
    let path = s.store.overlay_path(round, &q.image, label);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

#[derive(Debug, Deserialize)]
pub struct PutAnnotation {
    pub annotation: PolygonAnnotation,
    pub request_id: Option<String>,
}

/// Validates and stores an annotation for the upcoming round.
fn save_annotation(s: &Session, data: &SessionData, mut a: PolygonAnnotation) -> Result<PolygonAnnotation> {
    let snap = s.snapshot()?;
    let (index, _) = data
        .manifest
        .item(&a.image_id)
        .ok_or_else(|| Error::NotFound(format!("image {}", a.image_id)))?;
    if a.label_index >= data.manifest.num_labels() {
        return Err(refocus_core::Error::LabelOutOfRange {
            index: a.label_index,
            labels: data.manifest.num_labels(),
        }
        .into());
    }
    let _ = index;
    a.round_index = snap.round;
    let (rows, cols) = snap.model.heatmap_shape();
    let mask = rasterize(&a, rows, cols)?;
    if mask.empty {
        return Err(refocus_core::Error::EmptyMask.into());
    }
    s.store.save_annotation(&a)?;
    Ok(a)
}

async fn put_annotation(
    State(app): State<Arc<AppState>>,
    UrlPath(sid): UrlPath<String>,
    Json(req): Json<PutAnnotation>,
) -> ApiResult<Json<Value>> {
    let s = app.session(&sid)?;
    let _guard = s.lock.lock().await;
    if let Some(v) = s.recorded(req.request_id.as_deref()) {
        return Ok(Json(v));
    }
    let data = s.data()?;
    let saved = save_annotation(&s, &data, req.annotation)?;
    let response = serde_json::to_value(&saved).map_err(|e| Error::json("annotation", e))?;
    s.commit(req.request_id.as_deref(), &response, |_| {})?;
    Ok(Json(response))
}

async fn list_annotations(State(app): State<Arc<AppState>>, UrlPath(sid): UrlPath<String>) -> ApiResult<Json<Vec<PolygonAnnotation>>> {
    let s = app.session(&sid)?;
    Ok(Json(s.store.load_annotations()?))
}

#[derive(Debug, Deserialize)]
pub struct AcceptHeatmap {
    pub image: String,
    pub label: String,
    pub threshold: Option<f64>,
    pub request_id: Option<String>,
}

async fn accept_heatmap(
    State(app): State<Arc<AppState>>,
    UrlPath(sid): UrlPath<String>,
    Json(req): Json<AcceptHeatmap>,
) -> ApiResult<Json<Value>> {
    let s = app.session(&sid)?;
    let _guard = s.lock.lock().await;
    if let Some(v) = s.recorded(req.request_id.as_deref()) {
        return Ok(Json(v));
    }
    let data = s.data()?;
    let (index, label) = locate(&data, &req.image, &req.label)?;
    let snap = s.snapshot()?;
    let threshold = req.threshold.unwrap_or(app.config.accept_threshold);
    let s2 = s.clone();
    let saved = blocking(move || {
        let h = heatmap_for(&s2, &data, &snap, index, label)?;
        let mut a = heatmap_to_polygons(&h, threshold)?;
        a.note = format!("accepted heatmap at threshold {threshold}");
        save_annotation(&s2, &data, a)
    })
    .await?;
    let response = serde_json::to_value(&saved).map_err(|e| Error::json("annotation", e))?;
    s.commit(req.request_id.as_deref(), &response, |_| {})?;
    Ok(Json(response))
}

async fn start_finetune(
    State(app): State<Arc<AppState>>,
    UrlPath(sid): UrlPath<String>,
    body: Option<Json<StartJob>>,
) -> ApiResult<impl IntoResponse> {
    let req = body.map(|b| b.0).unwrap_or_default();
    let s = app.session(&sid)?;
    let _guard = s.lock.lock().await;
    if let Some(v) = s.recorded(req.request_id.as_deref()) {
        return Ok((StatusCode::OK, Json(v)));
    }
    let data = s.data()?;
    let snap = s.snapshot()?;
    let pending: Vec<PolygonAnnotation> = s
        .store
        .load_annotations()?
        .into_iter()
        .filter(|a| a.round_index == snap.round)
        .collect();
    if pending.is_empty() {
        return Err(Error::Rejected(format!(
            "no annotations or accepted heatmaps since round {}; annotate at least one image before fine-tuning",
            snap.round
        ))
        .into());
    }
    let params = req.params.unwrap_or_else(|| app.config.finetune.clone());
    params.validate()?;
    let job_id = claim_job(&s, JobKind::Finetune)?;
    let response = json!({ "job_id": job_id, "kind": "finetune", "annotations": pending.len() });
    s.commit(req.request_id.as_deref(), &response, |_| {})?;
    let fault = app.take_fault();
    let app2 = app.clone();
    let s2 = s.clone();
    tokio::task::spawn_blocking(move || {
        let result = run_finetune(&app2, &s2, &data, &snap, &pending, &params, fault);
        finish_job(&s2, &result);
    });
    Ok((StatusCode::ACCEPTED, Json(response)))
}

fn run_finetune(
    app: &AppState,
    s: &Session,
    data: &SessionData,
    snap: &RoundSnapshot,
    pending: &[PolygonAnnotation],
    params: &TrainingParams,
    fault: Option<Fault>,
) -> Result<u32> {
    let (rows, cols) = snap.model.heatmap_shape();
    let mut by_image: BTreeMap<usize, Vec<LabelMask>> = BTreeMap::new();
    let mut annotated_items = Vec::new();
    for a in pending {
        let (i, item) = data
            .manifest
            .item(&a.image_id)
            .ok_or_else(|| Error::NotFound(format!("image {}", a.image_id)))?;
        let mask = rasterize(a, rows, cols)?;
        by_image.entry(i).or_default().push(LabelMask {
            label: a.label_index,
            mask: mask.mask,
            correction: !item.has_label(a.label_index),
        });
        annotated_items.push((a.image_id.clone(), a.label_index));
    }
    let batch: Vec<Sample> = by_image
        .iter()
        .map(|(&i, masks)| Sample::new(data.images[i].clone(), data.manifest.items[i].truth()).with_masks(masks.clone()))
        .collect();
    let train_idx: Vec<usize> = data
        .manifest
        .indices(Split::Train)
        .into_iter()
        .filter(|i| !by_image.contains_key(i))
        .collect();
    let replay_pick = replay_indices(train_idx.len(), app.config.replay_fraction, params.seed)?;
    let replay: Vec<Sample> = samples(data, &replay_pick.iter().map(|&k| train_idx[k]).collect::<Vec<_>>());
    let mut labels: Vec<usize> = pending.iter().map(|a| a.label_index).collect();
    labels.sort_unstable();
    labels.dedup();
    let weights = dynamic_weights(&data.stats, app.config.base_weight, &labels)?;
    let kill_at = match fault {
        Some(Fault::KillFinetuneAtEpoch(e)) => Some(e),
        _ => None,
    };
    let out = finetune_round(&snap.model, &batch, &replay, &weights, params, progress_sink(s, kill_at))?;
    let round = out.model.round_index();
    let record = RoundRecord {
        round_index: round,
        parent_round: Some(snap.round),
        annotated_items,
        weights: Some(weights),
        params: params.clone(),
        checkpoint: SessionStore::checkpoint_name(round),
        epoch_losses: out.epoch_losses(),
    };
    publish(app, s, data, out.model, record, fault == Some(Fault::CrashBeforePublish))
}

#[derive(Debug, Deserialize)]
pub struct HistoryQuery {
    pub label: String,
}

async fn get_round_history(
    State(app): State<Arc<AppState>>,
    UrlPath(sid): UrlPath<String>,
    Query(q): Query<HistoryQuery>,
) -> ApiResult<Json<Vec<MetricsReport>>> {
    let s = app.session(&sid)?;
    let data = s.data()?;
    let label = resolve_label(&data.manifest, &q.label)?;
    let state = s.state.read().expect("lock");
    Ok(Json(state.history.for_label(label).cloned().collect()))
}

#[derive(Debug, Deserialize)]
pub struct ComparisonQuery {
    pub image: String,
    pub label: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub round_index: u32,
    pub probability: f64,
    pub predicted: u8,
    pub truth: u8,
    pub correct: bool,
    pub degenerate: bool,
    pub values: Vec<Vec<f64>>,
}

async fn get_comparison(
    State(app): State<Arc<AppState>>,
    UrlPath(sid): UrlPath<String>,
    Query(q): Query<ComparisonQuery>,
) -> ApiResult<Json<Vec<ComparisonEntry>>> {
    let s = app.session(&sid)?;
    let data = s.data()?;
    let (index, label) = locate(&data, &q.image, &q.label)?;
    let rounds: Vec<u32> = s.state.read().expect("lock").rounds.iter().map(|r| r.round_index).collect();
    let threshold = app.config.prediction_threshold;
    let out = blocking(move || {
        let mut out = Vec::with_capacity(rounds.len());
        for r in rounds {
            let snap = round_model(&s, Some(r))?;
            let h = heatmap_for(&s, &data, &snap, index, label)?;
            let p = snap.model.predict(&data.images[index])?.probabilities[label];
            let predicted = u8::from(p >= threshold);
            let truth = data.manifest.items[index].labels[label];
            out.push(ComparisonEntry {
                round_index: r,
                probability: p,
                predicted,
                truth,
                correct: predicted == truth,
                degenerate: h.degenerate,
                values: h.values.to_rows(),
            });
        }
        Ok(out)
    })
    .await?;
    Ok(Json(out))
}

/// Binds `config.port` and serves until the process is stopped.
pub async fn serve(config: Config) -> Result<()> {
    let addr = std::net::SocketAddr::from(([0, 0, 0, 0], config.port));
    let app = AppState::open(config)?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(Path::new(&addr.to_string()), e))?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(app))
        .await
        .map_err(|e| Error::io(Path::new(&addr.to_string()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn job_slot_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let s = Session::load("x".into(), SessionStore::new(dir.path())).unwrap();
        claim_job(&s, JobKind::Train).unwrap();
        assert!(matches!(claim_job(&s, JobKind::Finetune), Err(Error::Conflict(_))));
        finish_job(&s, &Ok(0));
        assert!(claim_job(&s, JobKind::Finetune).is_ok());
    }
}
