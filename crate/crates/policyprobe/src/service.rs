//! The review workflow over HTTP: classify with certainty routing, a leased
//! human-review queue, labels fed back into the training-set store, and
//! retuning jobs that swap the serving soft prompt when they finish.
//!
//! Lock order is queue, then serving, then store, then jobs. The serving
//! slot is only held long enough to clone or replace an `Arc`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Path, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use policyprobe_core::error::Error as CoreError;
use policyprobe_core::eval::decided_answer;
use policyprobe_core::optim::Adam;
use policyprobe_core::parser::ParsedAnswer;
use policyprobe_core::prompt::{Answer, HardPrompt};
use policyprobe_core::scorer::{Classification, Scorer, ScorerConfig};
use policyprobe_core::tuner::{init_soft_prompt_with, tune_from, SoftPrompt, TuneConfig, TuneError};
use policyprobe_core::FrozenModel;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::ServeDir;

use crate::checkpoint::save_soft_prompt;
use crate::config::{load_prompt, ServiceSettings};
use crate::store::{to_examples, Label, Record, Source, Store};

/// Losses reported by `GET /tune/{id}`.
const LOG_TAIL: usize = 20;

pub type ServingScorer = Scorer<Arc<FrozenModel>>;

/// One immutable serving setup; replaced wholesale on swap.
pub struct Serving {
    pub scorer: ServingScorer,
    /// Optimizer state that goes with the soft prompt, for continued tuning.
    pub adam: Option<Adam>,
    pub prompt_version: String,
}

impl Serving {
    pub fn step_count(&self) -> u64 {
        self.scorer.soft_prompt().map_or(0, |s| s.step_count)
    }
}

pub struct ServiceOptions {
    pub settings: ServiceSettings,
    pub scorer: ScorerConfig,
    pub tune: TuneConfig,
    /// Reloaded by `POST /prompt/reload`.
    pub prompt_path: Option<PathBuf>,
    /// Tuned prompts are saved here before they are swapped in.
    pub soft_prompt_path: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemStatus {
    Pending,
    Leased,
    Labeled,
}

#[derive(Clone, Debug, Serialize)]
pub struct QueueItem {
    pub id: u64,
    pub comment: String,
    pub classification: Classification,
    pub status: ItemStatus,
    pub human_label: Option<Label>,
    pub rater_id: Option<String>,
    /// Unix seconds.
    pub enqueue_time: f64,
    pub label_time: Option<f64>,
    pub lease_expires: Option<f64>,
    #[serde(skip)]
    lease_deadline: Option<Instant>,
}

#[derive(Default)]
struct Queue {
    items: Vec<QueueItem>,
    first_id: u64,
    accepted: u64,
}

impl Queue {
    /// Return expired leases to pending.
    fn expire(&mut self, now: Instant) {
        for it in &mut self.items {
            if it.status == ItemStatus::Leased && it.lease_deadline.is_some_and(|d| d <= now) {
                it.status = ItemStatus::Pending;
                it.lease_deadline = None;
                it.lease_expires = None;
            }
        }
    }

    fn get_mut(&mut self, id: u64) -> Option<&mut QueueItem> {
        let i = id.checked_sub(self.first_id)?;
        self.items.get_mut(usize::try_from(i).ok()?)
    }

    fn count(&self, s: ItemStatus) -> usize {
        self.items.iter().filter(|it| it.status == s).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Running,
    Succeeded,
    Failed,
}

#[derive(Clone, Debug, Serialize)]
pub struct TuneJob {
    pub job_id: u64,
    pub status: JobStatus,
    pub config: TuneConfig,
    pub examples: usize,
    pub steps_done: usize,
    pub train_log_tail: Vec<f64>,
    pub error: Option<String>,
    /// Step count of the soft prompt the job produced.
    pub step_count: Option<u64>,
    pub started: f64,
    pub finished: Option<f64>,
}

#[derive(Default)]
struct Jobs {
    jobs: BTreeMap<u64, TuneJob>,
    running: Option<u64>,
}

pub struct App {
    model: Option<(Arc<FrozenModel>, String)>,
    options: ServiceOptions,
    serving: RwLock<Option<Arc<Serving>>>,
    /// Serializes prompt reloads and tune swaps.
    swap: Mutex<()>,
    queue: Mutex<Queue>,
    store: Mutex<Store>,
    jobs: Mutex<Jobs>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn version_tag() -> String {
    format!("v{}", SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis()))
}

impl App {
    /// `model` is the backbone and its hash; without it the scoring
    /// endpoints answer 503.
    pub fn new(
        model: Option<(Arc<FrozenModel>, String)>,
        prompt: HardPrompt,
        soft: Option<(SoftPrompt, Option<Adam>)>,
        store: Store,
        options: ServiceOptions,
    ) -> anyhow::Result<Arc<Self>> {
        options.settings.validate()?;
        let serving = match &model {
            Some((m, _)) => {
                let (soft, adam) = soft.map_or((None, None), |(s, a)| (Some(s), a));
                let scorer = Scorer::new(m.clone(), soft.as_ref(), &prompt, options.scorer).context("building the scorer")?;
                Some(Arc::new(Serving { scorer, adam, prompt_version: version_tag() }))
            }
            None => None,
        };
        // Queue ids continue past labels already in the store.
        let first_id = store.records().iter().filter_map(|r| r.id.strip_prefix("queue-")?.parse::<u64>().ok()).max().unwrap_or(0) + 1;
        Ok(Arc::new(App {
            model,
            options,
            serving: RwLock::new(serving),
            swap: Mutex::new(()),
            queue: Mutex::new(Queue { first_id, ..Queue::default() }),
            store: Mutex::new(store),
            jobs: Mutex::new(Jobs::default()),
        }))
    }

    pub fn serving(&self) -> Option<Arc<Serving>> {
        self.serving.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn set_serving(&self, s: Serving) {
        *self.serving.write().unwrap_or_else(|e| e.into_inner()) = Some(Arc::new(s));
    }

    pub fn tau(&self) -> f64 {
        self.options.settings.tau
    }

    pub fn store_len(&self) -> usize {
        lock(&self.store).len()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into() }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }

    fn not_loaded() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded", "no backbone is loaded")
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::ContextOverflow { .. } => Self::new(StatusCode::PAYLOAD_TOO_LARGE, "context_overflow", e.to_string()),
            CoreError::Empty(_) => Self::new(StatusCode::BAD_REQUEST, "empty_input", e.to_string()),
            CoreError::UnsupportedChars { .. } | CoreError::Invalid(_) => Self::new(StatusCode::BAD_REQUEST, "invalid_input", e.to_string()),
            other => Self::internal(other),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, axum::Json(serde_json::json!({ "code": self.code, "message": self.message }))).into_response()
    }
}

/// JSON body whose rejections use the service's error shape.
pub struct Json<T>(pub T);

impl<S: Send + Sync, T: serde::de::DeserializeOwned> FromRequest<S> for Json<T> {
    type Rejection = ApiError;
    async fn from_request(req: Request, state: &S) -> Result<Self, ApiError> {
        match axum::Json::<T>::from_request(req, state).await {
            Ok(axum::Json(v)) => Ok(Json(v)),
            Err(e) => Err(ApiError::new(e.status(), rejection_code(&e), e.body_text())),
        }
    }
}

fn rejection_code(e: &JsonRejection) -> &'static str {
    match e {
        JsonRejection::MissingJsonContentType(_) => "unsupported_media_type",
        _ => "bad_request",
    }
}

impl<T: Serialize> IntoResponse for Json<T> {
    fn into_response(self) -> Response {
        axum::Json(self.0).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyRequest {
    pub comment: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Routed {
    Accepted,
    Enqueued,
}

#[derive(Serialize)]
pub struct ClassifyResponse {
    /// The generated answer, or the score's answer when it did not parse.
    pub answer: Answer,
    pub score: f64,
    pub certainty: f64,
    pub p_yes: f64,
    pub p_no: f64,
    pub explanation: String,
    pub citations: Vec<String>,
    pub keywords: Vec<String>,
    pub parsed_answer: ParsedAnswer,
    pub fully_grounded: bool,
    pub routed: Routed,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub queue_id: Option<u64>,
    pub soft_prompt_step_count: u64,
    pub prompt_version: String,
    pub latency_ms: f64,
}

async fn classify(State(app): State<Arc<App>>, Json(req): Json<ClassifyRequest>) -> ApiResult<ClassifyResponse> {
    if req.comment.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "empty_comment", "comment is empty"));
    }
    let serving = app.serving().ok_or_else(ApiError::not_loaded)?;
    let comment = req.comment;
    let (c, serving, comment) = tokio::task::spawn_blocking(move || {
        let t0 = Instant::now();
        let mut c = serving.scorer.classify(&comment)?;
        c.latency_ms = Some(t0.elapsed().as_secs_f64() * 1e3);
        Ok::<_, CoreError>((c, serving, comment))
    })
    .await
    .map_err(ApiError::internal)??;
    let accepted = c.score.certainty >= app.tau();
    let queue_id = {
        let mut q = lock(&app.queue);
        if accepted {
            q.accepted += 1;
            None
        } else {
            let id = q.first_id + q.items.len() as u64;
            q.items.push(QueueItem {
                id,
                comment,
                classification: c.clone(),
                status: ItemStatus::Pending,
                human_label: None,
                rater_id: None,
                enqueue_time: unix_now(),
                label_time: None,
                lease_expires: None,
                lease_deadline: None,
            });
            Some(id)
        }
    };
    let (yes, _) = decided_answer(&c);
    Ok(Json(ClassifyResponse {
        answer: Answer::from_bool(yes),
        score: c.score.score,
        certainty: c.score.certainty,
        p_yes: c.score.p_yes,
        p_no: c.score.p_no,
        explanation: c.parsed.explanation,
        citations: c.parsed.citations,
        keywords: c.parsed.keywords,
        parsed_answer: c.parsed.answer,
        fully_grounded: c.grounding.fully_grounded,
        routed: if accepted { Routed::Accepted } else { Routed::Enqueued },
        queue_id,
        soft_prompt_step_count: serving.step_count(),
        prompt_version: serving.prompt_version.clone(),
        latency_ms: c.latency_ms.unwrap_or(0.0),
    }))
}

#[derive(Deserialize, Default)]
pub struct NextQuery {
    pub rater_id: Option<String>,
}

async fn queue_next(State(app): State<Arc<App>>, query: axum::extract::Query<NextQuery>) -> Response {
    let now = Instant::now();
    let lease = Duration::from_secs_f64(app.options.settings.lease_secs);
    let mut q = lock(&app.queue);
    q.expire(now);
    match q.items.iter_mut().find(|it| it.status == ItemStatus::Pending) {
        Some(it) => {
            it.status = ItemStatus::Leased;
            it.lease_deadline = Some(now + lease);
            it.lease_expires = Some(unix_now() + lease.as_secs_f64());
            if query.rater_id.is_some() {
                it.rater_id.clone_from(&query.rater_id);
            }
            Json(it.clone()).into_response()
        }
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn queue_item(State(app): State<Arc<App>>, Path(id): Path<u64>) -> ApiResult<QueueItem> {
    let mut q = lock(&app.queue);
    q.expire(Instant::now());
    q.get_mut(id).map(|it| Json(it.clone())).ok_or_else(|| unknown_item(id))
}

fn unknown_item(id: u64) -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "unknown_item", format!("no queue item {id}"))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRequest {
    pub label: Label,
    #[serde(default)]
    pub rater_id: Option<String>,
}

async fn queue_label(State(app): State<Arc<App>>, Path(id): Path<u64>, Json(req): Json<LabelRequest>) -> ApiResult<QueueItem> {
    let mut q = lock(&app.queue);
    let item = q.get_mut(id).ok_or_else(|| unknown_item(id))?;
    if item.status == ItemStatus::Labeled {
        return Err(ApiError::new(StatusCode::CONFLICT, "already_labeled", format!("queue item {id} is already labeled")));
    }
    let record = Record { id: format!("queue-{id}"), text: item.comment.clone(), label: req.label, ratings: None, source: Source::HumanQueue };
    // Appending while the queue is locked keeps a label and its record in step.
    lock(&app.store).append(record).map_err(|e| ApiError::internal(format!("{e:#}")))?;
    item.status = ItemStatus::Labeled;
    item.human_label = Some(req.label);
    item.label_time = Some(unix_now());
    item.lease_deadline = None;
    item.lease_expires = None;
    if req.rater_id.is_some() {
        item.rater_id = req.rater_id;
    }
    Ok(Json(item.clone()))
}

#[derive(Serialize)]
pub struct Metrics {
    pub queue_depth: usize,
    pub labeled_count: usize,
    /// accepted / (accepted + enqueued) over the process lifetime.
    pub accept_rate: Option<f64>,
    pub current_tau: f64,
    pub backbone_hash: Option<String>,
    pub soft_prompt_step_count: u64,
    pub accepted: u64,
    pub enqueued: u64,
    pub pending: usize,
    pub leased: usize,
    pub labeled: usize,
    pub store_count: usize,
    pub prompt_version: Option<String>,
    pub tune_running: Option<u64>,
}

pub fn metrics_snapshot(app: &App) -> Metrics {
    let mut q = lock(&app.queue);
    q.expire(Instant::now());
    let serving = app.serving();
    let store_count = lock(&app.store).len();
    let tune_running = lock(&app.jobs).running;
    let (pending, leased, labeled) = (q.count(ItemStatus::Pending), q.count(ItemStatus::Leased), q.count(ItemStatus::Labeled));
    let enqueued = q.items.len() as u64;
    let total = q.accepted + enqueued;
    Metrics {
        queue_depth: pending + leased,
        labeled_count: labeled,
        accept_rate: (total > 0).then(|| q.accepted as f64 / total as f64),
        current_tau: app.tau(),
        backbone_hash: app.model.as_ref().map(|(_, h)| h.clone()),
        soft_prompt_step_count: serving.as_ref().map_or(0, |s| s.step_count()),
        accepted: q.accepted,
        enqueued,
        pending,
        leased,
        labeled,
        store_count,
        prompt_version: serving.map(|s| s.prompt_version.clone()),
        tune_running,
    }
}

async fn metrics(State(app): State<Arc<App>>) -> Json<Metrics> {
    Json(metrics_snapshot(&app))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TuneRequest {
    /// Overrides the configured tuning settings.
    #[serde(default)]
    pub config: Option<TuneConfig>,
    /// Start from a new soft prompt instead of the serving one.
    #[serde(default)]
    pub fresh: bool,
}

#[derive(Serialize)]
pub struct TuneStarted {
    pub job_id: u64,
}

async fn tune_start(State(app): State<Arc<App>>, body: Bytes) -> Result<(StatusCode, Json<TuneStarted>), ApiError> {
    // The body is optional.
    let req: TuneRequest = if body.iter().all(u8::is_ascii_whitespace) {
        TuneRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.to_string()))?
    };
    let model = app.model.as_ref().map(|(m, _)| m.clone()).ok_or_else(ApiError::not_loaded)?;
    let config = req.config.unwrap_or(app.options.tune);
    config.validate()?;
    if config.include_hard_prompt != app.options.scorer.include_hard_prompt {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_input", "include_hard_prompt must match the serving scorer"));
    }
    let records = lock(&app.store).records().to_vec();
    if records.is_empty() {
        return Err(ApiError::new(StatusCode::CONFLICT, "empty_store", "the training set is empty"));
    }
    let job_id = {
        let mut jobs = lock(&app.jobs);
        if let Some(id) = jobs.running {
            return Err(ApiError::new(StatusCode::CONFLICT, "tune_running", format!("tuning job {id} is still running")));
        }
        let job_id = jobs.jobs.keys().next_back().map_or(1, |k| k + 1);
        jobs.jobs.insert(
            job_id,
            TuneJob {
                job_id,
                status: JobStatus::Running,
                config,
                examples: records.len(),
                steps_done: 0,
                train_log_tail: Vec::new(),
                error: None,
                step_count: None,
                started: unix_now(),
                finished: None,
            },
        );
        jobs.running = Some(job_id);
        job_id
    };
    let worker = app.clone();
    let handle = tokio::task::spawn_blocking(move || run_tune(&worker, job_id, model, records, config, req.fresh));
    let watcher = app.clone();
    tokio::spawn(async move {
        let outcome = match handle.await {
            Ok(r) => r,
            Err(e) if e.is_panic() => Err("tuning job panicked".to_string()),
            Err(e) => Err(e.to_string()),
        };
        let mut jobs = lock(&watcher.jobs);
        if let Some(job) = jobs.jobs.get_mut(&job_id) {
            match outcome {
                Ok(step_count) => {
                    job.status = JobStatus::Succeeded;
                    job.step_count = Some(step_count);
                }
                Err(e) => {
                    job.status = JobStatus::Failed;
                    job.error = Some(e);
                }
            }
            job.finished = Some(unix_now());
        }
        jobs.running = None;
    });
    Ok((StatusCode::ACCEPTED, Json(TuneStarted { job_id })))
}

/// Tune on the whole store and swap the result in. The serving setup is
/// untouched unless every step succeeds.
fn run_tune(app: &App, job_id: u64, model: Arc<FrozenModel>, records: Vec<Record>, config: TuneConfig, fresh: bool) -> Result<u64, String> {
    let start = app.serving().ok_or("no serving setup")?;
    let prompt = start.scorer.prompt().clone();
    let (soft, mut adam) = match (fresh, start.scorer.soft_prompt()) {
        (false, Some(s)) => (s.clone(), start.adam.clone().unwrap_or_else(|| Adam::new(s.embeddings.len()))),
        _ => {
            let s = init_soft_prompt_with(&model, config.n_prefix, config.seed, config.init).map_err(|e| e.to_string())?;
            let a = Adam::new(s.embeddings.len());
            (s, a)
        }
    };
    let train = to_examples(&records);
    let mut observe = |p: &policyprobe_core::tuner::TuneProgress| {
        let mut jobs = lock(&app.jobs);
        if let Some(job) = jobs.jobs.get_mut(&job_id) {
            job.steps_done = p.step;
            job.train_log_tail.push(p.loss);
            let n = job.train_log_tail.len();
            if n > LOG_TAIL {
                job.train_log_tail.drain(..n - LOG_TAIL);
            }
        }
    };
    let (soft, _log) = tune_from(&model, &prompt, &train, &[], &config, soft, &mut adam, Some(&mut observe)).map_err(|e| match e {
        TuneError::Diverged { step, .. } => format!("training diverged at step {step}; the serving prompt is unchanged"),
        TuneError::Core(e) => e.to_string(),
    })?;
    let _guard = lock(&app.swap);
    let current = app.serving().ok_or("no serving setup")?;
    if let (Some(path), Some((_, hash))) = (&app.options.soft_prompt_path, &app.model) {
        save_soft_prompt(&soft, hash, Some(&adam), path).map_err(|e| format!("{e:#}"))?;
    }
    // Keep any prompt reloaded while the job ran.
    let scorer = Scorer::new(model, Some(&soft), current.scorer.prompt(), app.options.scorer).map_err(|e| e.to_string())?;
    let step_count = soft.step_count;
    app.set_serving(Serving { scorer, adam: Some(adam), prompt_version: current.prompt_version.clone() });
    Ok(step_count)
}

async fn tune_status(State(app): State<Arc<App>>, Path(id): Path<u64>) -> ApiResult<TuneJob> {
    lock(&app.jobs)
        .jobs
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_job", format!("no tuning job {id}")))
}

#[derive(Serialize)]
pub struct PromptInfo {
    pub version: String,
    pub guideline: String,
    pub prompt: HardPrompt,
}

async fn prompt_get(State(app): State<Arc<App>>) -> ApiResult<PromptInfo> {
    let s = app.serving().ok_or_else(ApiError::not_loaded)?;
    let prompt = s.scorer.prompt().clone();
    Ok(Json(PromptInfo { version: s.prompt_version.clone(), guideline: prompt.guideline.render(), prompt }))
}

async fn prompt_reload(State(app): State<Arc<App>>) -> ApiResult<PromptInfo> {
    let path = app
        .options
        .prompt_path
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "no_prompt_path", "the service was started without a prompt file"))?;
    let worker = app.clone();
    tokio::task::spawn_blocking(move || {
        let prompt = load_prompt(Some(&path)).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_prompt", format!("{e:#}")))?;
        let _guard = lock(&worker.swap);
        let current = worker.serving().ok_or_else(ApiError::not_loaded)?;
        let model = worker.model.as_ref().map(|(m, _)| m.clone()).ok_or_else(ApiError::not_loaded)?;
        let scorer = Scorer::new(model, current.scorer.soft_prompt(), &prompt, worker.options.scorer)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_prompt", e.to_string()))?;
        let version = version_tag();
        worker.set_serving(Serving { scorer, adam: current.adam.clone(), prompt_version: version.clone() });
        Ok(Json(PromptInfo { version, guideline: prompt.guideline.render(), prompt }))
    })
    .await
    .map_err(ApiError::internal)?
}

async fn health(State(app): State<Arc<App>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "model_loaded": app.model.is_some() }))
}

async fn require_token(State(app): State<Arc<App>>, req: Request, next: Next) -> Response {
    if let Some(token) = &app.options.settings.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

async fn method_not_allowed() -> ApiError {
    ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed", "method not allowed for this endpoint")
}

pub fn router(app: Arc<App>) -> Router {
    let api = Router::new()
        .route("/classify", post(classify))
        .route("/queue/next", get(queue_next))
        .route("/queue/{id}", get(queue_item))
        .route("/queue/{id}/label", post(queue_label))
        .route("/tune", post(tune_start))
        .route("/tune/{id}", get(tune_status))
        .route("/metrics", get(metrics))
        .route("/prompt", get(prompt_get))
        .route("/prompt/reload", post(prompt_reload))
        .route_layer(middleware::from_fn_with_state(app.clone(), require_token))
        .route("/health", get(health))
        .method_not_allowed_fallback(method_not_allowed);
    let mut router = match &app.options.settings.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(not_found),
    };
    let origins = &app.options.settings.cors_origins;
    if !origins.is_empty() {
        let allow = if origins.iter().any(|o| o == "*") {
            AllowOrigin::any()
        } else {
            AllowOrigin::list(origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
        };
        router = router.layer(
            CorsLayer::new().allow_origin(allow).allow_methods([Method::GET, Method::POST]).allow_headers([header::CONTENT_TYPE, header::AUTHORIZATION]),
        );
    }
    router.with_state(app)
}

/// Serve until ctrl-c.
pub async fn serve(app: Arc<App>, listener: tokio::net::TcpListener) -> anyhow::Result<()> {
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// Bind `addr`, returning the listener and its actual address.
pub async fn bind(addr: &str) -> anyhow::Result<(tokio::net::TcpListener, SocketAddr)> {
    let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
    let local = listener.local_addr()?;
    Ok((listener, local))
}
