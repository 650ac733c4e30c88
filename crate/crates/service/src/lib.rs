//! HTTP API for operators and the review UI.
//!
//! The service binds a rulebase file, a verdict log, a feedback queue and
//! optionally a metrics report and a frame dump directory. Every mutation
//! goes through the same rulebase and evolution operations the CLI uses, and
//! files edited by other processes are picked up on the next request.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::SystemTime;

use axum::body::{Body, Bytes};
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cerberus_core::cascade::{dump_name, read_verdicts, VerdictRecord};
use cerberus_core::eval::MetricsReport;
use cerberus_core::evolution::{apply_uil, FeedbackItem, FeedbackKind, FeedbackQueue, UilDecision};
use cerberus_core::rulebase::{build_candidate_pool, Params, Rule, RuleKind, RuleStore};
use cerberus_core::scoring::Verdict;
use cerberus_core::Error;
use serde::{Deserialize, Serialize};

pub const VERSION_HEADER: &str = "x-rulebase-version";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub rulebase: PathBuf,
    pub verdicts: PathBuf,
    pub queue: PathBuf,
    pub metrics: Option<PathBuf>,
    /// Directory holding dumped prompt frames, served under `/frames/`.
    pub frames_dir: Option<PathBuf>,
    /// Static bearer token; when set every endpoint except health requires it.
    pub token: Option<String>,
}

impl ServiceConfig {
    pub fn new(rulebase: impl Into<PathBuf>, verdicts: impl Into<PathBuf>, queue: impl Into<PathBuf>) -> Self {
        Self { rulebase: rulebase.into(), verdicts: verdicts.into(), queue: queue.into(), metrics: None, frames_dir: None, token: None }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },

    #[error("store {path}: {source}")]
    StoreCorrupt {
        path: PathBuf,
        #[source]
        source: Error,
    },

    #[error("server: {0}")]
    Server(#[source] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Stamp {
    modified: Option<SystemTime>,
    len: u64,
}

fn stamp(path: &Path) -> Option<Stamp> {
    fs::metadata(path).ok().map(|m| Stamp { modified: m.modified().ok(), len: m.len() })
}

/// State shared by the writers: the queue and what we last saw on disk.
struct Writer {
    queue: FeedbackQueue,
    queue_stamp: Option<Stamp>,
    rules_stamp: Option<Stamp>,
}

#[derive(Default)]
struct VerdictIndex {
    stamp: Option<Stamp>,
    /// Records per scene, ordered by seq (file order among equal seqs).
    scenes: BTreeMap<String, Vec<VerdictRecord>>,
    frames: HashMap<String, (String, usize)>,
}

impl VerdictIndex {
    fn load(path: &Path) -> Result<Self, Error> {
        let stamp = stamp(path);
        let mut scenes: BTreeMap<String, Vec<VerdictRecord>> = BTreeMap::new();
        for record in read_verdicts(path)? {
            scenes.entry(record.scene.clone()).or_default().push(record);
        }
        let mut frames = HashMap::new();
        for (scene, records) in &mut scenes {
            records.sort_by_key(|r| r.seq);
            for (i, r) in records.iter().enumerate() {
                frames.insert(r.frame_id.clone(), (scene.clone(), i));
            }
        }
        Ok(Self { stamp, scenes, frames })
    }

    fn record(&self, frame_id: &str) -> Option<&VerdictRecord> {
        let (scene, i) = self.frames.get(frame_id)?;
        self.scenes.get(scene)?.get(*i)
    }

    fn len(&self) -> usize {
        self.frames.len()
    }
}

pub struct AppState {
    config: ServiceConfig,
    rules: RuleStore,
    writer: Mutex<Writer>,
    verdicts: RwLock<Arc<VerdictIndex>>,
}

impl AppState {
    /// Open all stores. The queue file is created if missing; the rulebase
    /// and verdict log must exist and parse.
    pub fn open(config: ServiceConfig) -> Result<Self, ServiceError> {
        let corrupt = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ServiceError::StoreCorrupt { path, source }
        };
        let rules = RuleStore::open(&config.rulebase).map_err(corrupt(&config.rulebase))?;
        let queue = FeedbackQueue::open(&config.queue).map_err(corrupt(&config.queue))?;
        let verdicts = VerdictIndex::load(&config.verdicts).map_err(corrupt(&config.verdicts))?;
        let writer = Writer { queue_stamp: stamp(&config.queue), rules_stamp: stamp(&config.rulebase), queue };
        Ok(Self { rules, writer: Mutex::new(writer), verdicts: RwLock::new(Arc::new(verdicts)), config })
    }

    pub fn rulebase_version(&self) -> u64 {
        self.rules.version()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Writer> {
        self.writer.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Pick up edits made to the rulebase or queue files by other processes.
    fn sync(&self) -> Result<(), Error> {
        let mut w = self.lock();
        let rules_now = stamp(&self.config.rulebase);
        if rules_now != w.rules_stamp {
            self.rules.reload()?;
            w.rules_stamp = rules_now;
        }
        let queue_now = stamp(&self.config.queue);
        if queue_now != w.queue_stamp {
            w.queue = FeedbackQueue::open(&self.config.queue)?;
            w.queue_stamp = queue_now;
        }
        Ok(())
    }

    fn record_writes(&self, w: &mut Writer) {
        w.rules_stamp = stamp(&self.config.rulebase);
        w.queue_stamp = stamp(&self.config.queue);
    }

    fn verdicts(&self) -> Result<Arc<VerdictIndex>, Error> {
        let now = stamp(&self.config.verdicts);
        {
            let current = self.verdicts.read().unwrap_or_else(|e| e.into_inner());
            if current.stamp == now {
                return Ok(current.clone());
            }
        }
        let fresh = Arc::new(VerdictIndex::load(&self.config.verdicts)?);
        *self.verdicts.write().unwrap_or_else(|e| e.into_inner()) = fresh.clone();
        Ok(fresh)
    }
}

#[derive(Debug)]
enum ApiError {
    Core(Error),
    BadRequest(String),
    NotFound(String),
    Unauthorized,
    Internal(String),
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError::Core(e)
    }
}

fn core_status(e: &Error) -> (StatusCode, &'static str) {
    use Error::*;
    match e {
        UnknownItem(_) => (StatusCode::NOT_FOUND, "unknown_item"),
        UnknownScene(_) => (StatusCode::NOT_FOUND, "unknown_scene"),
        UnknownFrame(_) => (StatusCode::NOT_FOUND, "unknown_frame"),
        AlreadyDecided(_) => (StatusCode::CONFLICT, "already_decided"),
        StaleVersion { .. } => (StatusCode::CONFLICT, "stale_version"),
        DuplicateRule(_) => (StatusCode::CONFLICT, "duplicate_rule"),
        EmptyRuleText => (StatusCode::BAD_REQUEST, "empty_rule_text"),
        BadParams(_) | InvalidParams(_) => (StatusCode::BAD_REQUEST, "bad_params"),
        Json(_) => (StatusCode::BAD_REQUEST, "bad_json"),
        StoreCorrupt(_) | SchemaVersionMismatch { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "store_corrupt"),
        _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code, message) = match self {
            ApiError::Core(e) => {
                let (status, code) = core_status(&e);
                (status, code, e.to_string())
            }
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, "bad_request", m),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, "not_found", m),
            ApiError::Unauthorized => (StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token".into()),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, "internal", m),
        };
        if status.is_server_error() {
            tracing::error!(%message, "request failed");
        }
        (status, Json(serde_json::json!({ "error": code, "message": message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Shared = Arc<AppState>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Internal(e.to_string()))?
}

/// Parse an `If-Match` header holding a rulebase version (`3` or `"3"`).
fn expected_version(headers: &HeaderMap) -> ApiResult<Option<u64>> {
    let Some(value) = headers.get(header::IF_MATCH) else { return Ok(None) };
    let text = value.to_str().unwrap_or("").trim();
    let text = text.strip_prefix("W/").unwrap_or(text).trim_matches('"');
    text.parse().map(Some).map_err(|_| ApiError::BadRequest(format!("If-Match must be a rulebase version, got {text:?}")))
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("invalid request body: {e}")))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/rulebase", get(rulebase))
        .route("/api/rules", post(add_rule))
        .route("/api/feedback/pending", get(pending))
        .route("/api/feedback/{id}", post(decide))
        .route("/api/timeline", get(timeline))
        .route("/api/metrics/latest", get(metrics))
        .route("/frames/{file}", get(frame))
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .layer(middleware::from_fn_with_state(state.clone(), stamp_version))
        .with_state(state)
}

async fn auth(State(state): State<Shared>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.config.token {
        let ok = req.uri().path() == "/api/health"
            || req
                .headers()
                .get(header::AUTHORIZATION)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.strip_prefix("Bearer "))
                .is_some_and(|v| v == token);
        if !ok {
            return ApiError::Unauthorized.into_response();
        }
    }
    next.run(req).await
}

/// Sync with disk before the handler runs and tag the response with the
/// rulebase version.
async fn stamp_version(State(state): State<Shared>, req: Request, next: Next) -> Response {
    let s = state.clone();
    let mut resp = match blocking(move || s.sync().map_err(ApiError::from)).await {
        Ok(()) => next.run(req).await,
        Err(e) => e.into_response(),
    };
    resp.headers_mut().insert(VERSION_HEADER, HeaderValue::from(state.rules.version()));
    resp
}

async fn health(State(state): State<Shared>) -> ApiResult<Json<serde_json::Value>> {
    blocking(move || {
        let verdicts = state.verdicts()?.len();
        let w = state.lock();
        Ok(Json(serde_json::json!({
            "status": "ok",
            "rulebase_version": state.rules.version(),
            "verdicts": verdicts,
            "pending_uil": w.queue.pending(FeedbackKind::UilPending).len(),
            "pending_f2c": w.queue.pending(FeedbackKind::F2cCandidate).len(),
        })))
    })
    .await
}

#[derive(Serialize)]
struct RuleCounts {
    normal: usize,
    custom: usize,
    perturbed: usize,
}

#[derive(Serialize)]
struct RulebaseView {
    version: u64,
    params: Params,
    normal_rules: Vec<Rule>,
    custom_anomaly_rules: Vec<Rule>,
    perturbed_labels: Vec<String>,
    counts: RuleCounts,
}

async fn rulebase(State(state): State<Shared>) -> Json<RulebaseView> {
    let rb = state.rules.snapshot();
    Json(RulebaseView {
        version: rb.version,
        params: rb.params.clone(),
        normal_rules: rb.normal_rules.clone(),
        custom_anomaly_rules: rb.custom_anomaly_rules.clone(),
        perturbed_labels: rb.perturbed_labels.clone(),
        counts: RuleCounts { normal: rb.normal_rules.len(), custom: rb.custom_anomaly_rules.len(), perturbed: rb.perturbed_labels.len() },
    })
}

fn default_kind() -> RuleKind {
    RuleKind::Anomaly
}

#[derive(Deserialize)]
struct NewRule {
    text: String,
    #[serde(default = "default_kind")]
    kind: RuleKind,
}

async fn add_rule(State(state): State<Shared>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let req: NewRule = parse_body(&body)?;
    let expected = expected_version(&headers)?;
    blocking(move || {
        let mut w = state.lock();
        let result = state.rules.update(expected, |rb| rb.add_custom_rule(&req.text, req.kind));
        state.record_writes(&mut w);
        let (_, rb) = result?;
        let body = serde_json::json!({ "version": rb.version, "kind": req.kind, "text": req.text.trim() });
        Ok((StatusCode::CREATED, Json(body)).into_response())
    })
    .await
}

#[derive(Deserialize)]
struct PendingQuery {
    kind: Option<String>,
}

#[derive(Serialize)]
struct EvidenceEntry {
    stage: &'static str,
    candidate_id: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    sim: f64,
    polarity: i8,
}

#[derive(Serialize)]
struct PendingView {
    #[serde(flatten)]
    item: FeedbackItem,
    #[serde(skip_serializing_if = "Option::is_none")]
    frame_url: Option<String>,
    /// Top-k candidates of the deciding stage. Texts are included only when
    /// the verdict was produced with the current rulebase version.
    topk: Vec<EvidenceEntry>,
}

fn parse_kind(kind: Option<&str>) -> ApiResult<FeedbackKind> {
    match kind.unwrap_or("uil") {
        "uil" | "uil_pending" => Ok(FeedbackKind::UilPending),
        "f2c" | "f2c_candidate" => Ok(FeedbackKind::F2cCandidate),
        other => Err(ApiError::BadRequest(format!("unknown feedback kind {other:?}"))),
    }
}

fn frame_url(frames_dir: Option<&Path>, frame_id: &str) -> Option<String> {
    let name = dump_name(frame_id);
    frames_dir.filter(|dir| dir.join(&name).is_file()).map(|_| format!("/frames/{}", name.replace('#', "%23")))
}

async fn pending(State(state): State<Shared>, Query(q): Query<PendingQuery>, headers: HeaderMap) -> ApiResult<Response> {
    let kind = parse_kind(q.kind.as_deref())?;
    blocking(move || {
        let verdicts = state.verdicts()?;
        let rb = state.rules.snapshot();
        let w = state.lock();
        let etag = format!("\"q{}-r{}-v{}\"", w.queue.revision(), rb.version, verdicts.stamp.map_or(0, |s| s.len));
        if headers.get(header::IF_NONE_MATCH).and_then(|v| v.to_str().ok()) == Some(etag.as_str()) {
            return Ok((StatusCode::NOT_MODIFIED, [(header::ETAG, etag)]).into_response());
        }
        let texts = build_candidate_pool(&rb).ok().map(|p| p.texts());
        let items: Vec<PendingView> = w
            .queue
            .pending(kind)
            .into_iter()
            .map(|item| {
                let record = verdicts.record(&item.frame_id);
                let topk = record
                    .and_then(|r| {
                        let same = r.rulebase_version == rb.version;
                        let (stage, health) = match (&r.stage2, &r.stage1) {
                            (Some(s2), _) => ("stage2", &s2.outcome.health),
                            (None, Some(s1)) => ("stage1", &s1.health),
                            _ => return None,
                        };
                        Some(
                            health
                                .topk
                                .iter()
                                .map(|c| EvidenceEntry {
                                    stage,
                                    candidate_id: c.candidate_id,
                                    text: texts.as_ref().filter(|_| same).and_then(|t| t.get(c.candidate_id).cloned()),
                                    sim: c.sim,
                                    polarity: if c.weight < 0.0 { -1 } else { 1 },
                                })
                                .collect(),
                        )
                    })
                    .unwrap_or_default();
                PendingView { frame_url: frame_url(state.config.frames_dir.as_deref(), &item.frame_id), item: item.clone(), topk }
            })
            .collect();
        Ok(([(header::ETAG, etag)], Json(items)).into_response())
    })
    .await
}

async fn decide(State(state): State<Shared>, UrlPath(id): UrlPath<String>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let id: u64 = id.parse().map_err(|_| ApiError::BadRequest(format!("bad item id {id:?}")))?;
    let decision: UilDecision = parse_body(&body)?;
    let expected = expected_version(&headers)?;
    blocking(move || {
        let mut guard = state.lock();
        let w = &mut *guard;
        let result = apply_uil(&state.rules, &mut w.queue, id, &decision, expected);
        state.record_writes(w);
        Ok(Json(result?).into_response())
    })
    .await
}

#[derive(Deserialize)]
struct TimelineQuery {
    scene: Option<String>,
    from: Option<usize>,
    to: Option<usize>,
}

#[derive(Serialize)]
struct TimelinePoint<'a> {
    frame_id: &'a str,
    seq: u64,
    anomaly_score: f64,
    final_label: Verdict,
    p: f64,
}

/// Points `[from, to)` of the scene's seq-ordered records.
async fn timeline(State(state): State<Shared>, Query(q): Query<TimelineQuery>) -> ApiResult<Response> {
    let scene = q.scene.ok_or_else(|| ApiError::BadRequest("missing scene".into()))?;
    blocking(move || {
        let verdicts = state.verdicts()?;
        let records = verdicts.scenes.get(&scene).ok_or_else(|| Error::UnknownScene(scene.clone()))?;
        let to = q.to.unwrap_or(records.len()).min(records.len());
        let from = q.from.unwrap_or(0);
        if from > to {
            return Err(ApiError::BadRequest(format!("empty range [{from}, {to})")));
        }
        let points: Vec<TimelinePoint> = records[from..to]
            .iter()
            .map(|r| TimelinePoint {
                frame_id: &r.frame_id,
                seq: r.seq,
                anomaly_score: r.anomaly_score,
                final_label: r.final_label,
                p: r.p,
            })
            .collect();
        Ok(Json(points).into_response())
    })
    .await
}

async fn metrics(State(state): State<Shared>) -> ApiResult<Json<MetricsReport>> {
    blocking(move || {
        let path = state.config.metrics.clone().filter(|p| p.exists()).ok_or_else(|| ApiError::NotFound("no metrics report".into()))?;
        Ok(Json(MetricsReport::load(&path)?))
    })
    .await
}

fn safe_file_name(name: &str) -> bool {
    !name.is_empty() && !name.starts_with('.') && name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.#".contains(c))
}

async fn frame(State(state): State<Shared>, UrlPath(file): UrlPath<String>) -> ApiResult<Response> {
    let dir = state.config.frames_dir.clone().ok_or_else(|| ApiError::NotFound("no frame directory".into()))?;
    if !safe_file_name(&file) {
        return Err(ApiError::BadRequest(format!("bad frame file name {file:?}")));
    }
    blocking(move || {
        let bytes = fs::read(dir.join(&file)).map_err(|_| ApiError::NotFound(format!("no frame {file:?}")))?;
        let mime = match Path::new(&file).extension().and_then(|e| e.to_str()) {
            Some("png") => "image/png",
            Some("jpg" | "jpeg") => "image/jpeg",
            _ => "application/octet-stream",
        };
        Ok(([(header::CONTENT_TYPE, mime)], Body::from(bytes)).into_response())
    })
    .await
}

pub async fn serve(config: ServiceConfig, addr: SocketAddr) -> Result<(), ServiceError> {
    let state = Arc::new(AppState::open(config)?);
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|source| ServiceError::Bind { addr, source })?;
    if let Ok(local) = listener.local_addr() {
        tracing::info!(%local, version = state.rulebase_version(), "listening");
    }
    axum::serve(listener, router(state)).await.map_err(ServiceError::Server)
}

/// Run [`serve`] on a fresh multi-threaded runtime.
pub fn serve_blocking(config: ServiceConfig, addr: SocketAddr) -> Result<(), ServiceError> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(ServiceError::Server)?.block_on(serve(config, addr))
}
