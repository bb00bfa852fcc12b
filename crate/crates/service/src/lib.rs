//! HTTP JSON API over a loaded checkpoint and dataset: importance heatmaps,
//! attention matrices, pattern registration and GR evaluation jobs, and
//! injection-config export for the next training run.
//!
//! Analysis endpoints return the same text the CLI writes for the same
//! inputs. No endpoint touches model parameters.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use headwise::config::RunConfig;
use headwise::corpus::{Dataset, Document};
use headwise::importance::{self, Method};
use headwise::model::{ForwardTrace, HeadAssignment, HeadFamily, HeadId, Model};
use headwise::patterns::{gr_dataset, PatternSpec};
use serde::{Deserialize, Serialize};
use serde_json::json;

/// Everything `serve` needs to build a session.
#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub run: RunConfig,
    /// Directory relative data paths resolve against.
    pub base_dir: PathBuf,
    pub checkpoint: PathBuf,
    /// Split analysis endpoints use unless a request names another.
    pub split: String,
    /// Directory whose subdirectories hold `run_log.json` files.
    pub runs_dir: Option<PathBuf>,
    pub injection_path: PathBuf,
}

/// Immutable part of the session plus the serialized mutable state.
struct Inner {
    checkpoint: String,
    model: Arc<Model>,
    run: RunConfig,
    base_dir: PathBuf,
    split: String,
    datasets: BTreeMap<String, Arc<Dataset>>,
    runs_dir: Option<PathBuf>,
    injection_path: PathBuf,
    traces: Mutex<HashMap<(String, String), Arc<ForwardTrace>>>,
    importance: Mutex<HashMap<(String, Method), Arc<String>>>,
    session: Mutex<Session>,
    jobs: Mutex<Jobs>,
}

struct Session {
    patterns: BTreeMap<String, PatternSpec>,
    injection: Vec<HeadAssignment>,
}

#[derive(Clone)]
enum Job {
    Running,
    Done(Arc<String>),
    Failed(String),
}

#[derive(Default)]
struct Jobs {
    next: u64,
    running: Option<u64>,
    all: BTreeMap<u64, Job>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// Loads the checkpoint and both splits. Missing artifacts are errors.
    pub fn load(config: ServiceConfig) -> headwise::Result<Self> {
        let model = Model::load(&config.checkpoint)?;
        let (train, valid) = config.run.datasets(&config.base_dir)?;
        let checkpoint = config.checkpoint.display().to_string();
        Self::new(model, checkpoint, vec![train, valid], config)
    }

    /// Session over an in-memory model and datasets (keyed by `split`).
    pub fn new(model: Model, checkpoint: String, datasets: Vec<Dataset>, config: ServiceConfig) -> headwise::Result<Self> {
        let datasets: BTreeMap<String, Arc<Dataset>> =
            datasets.into_iter().map(|d| (d.split.clone(), Arc::new(d))).collect();
        if !datasets.contains_key(&config.split) {
            return Err(headwise::Error::config("split", format!("split {:?} not loaded", config.split)));
        }
        let patterns = [
            PatternSpec::matching_token(),
            PatternSpec::intra_sentence(),
            PatternSpec::relative_position(-1),
            PatternSpec::relative_position(1),
        ]
        .into_iter()
        .map(|p| (p.name.clone(), p))
        .collect();
        Ok(Self(Arc::new(Inner {
            checkpoint,
            model: Arc::new(model),
            run: config.run,
            base_dir: config.base_dir,
            split: config.split,
            datasets,
            runs_dir: config.runs_dir,
            injection_path: config.injection_path,
            traces: Mutex::default(),
            importance: Mutex::default(),
            session: Mutex::new(Session {
                patterns,
                injection: Vec::new(),
            }),
            jobs: Mutex::default(),
        })))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/info", get(info))
        .route("/api/docs", get(docs))
        .route("/api/doc/{id}", get(doc))
        .route("/api/importance", get(importance_report))
        .route("/api/attention", get(attention))
        .route("/api/patterns", get(list_patterns).post(register_pattern))
        .route("/api/patterns/{name}/evaluate", post(evaluate_pattern))
        .route("/api/jobs/{id}", get(job))
        .route("/api/injection-config", get(get_injection).post(post_injection))
        .route("/api/runs", get(runs))
        .route("/api/runs/{id}", get(run))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "no such endpoint") })
        .with_state(state)
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(config: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    let state = AppState::load(config).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl From<headwise::Error> for ApiError {
    fn from(e: headwise::Error) -> Self {
        use headwise::Error as E;
        let status = match e {
            E::InvalidConfig { .. } | E::Shape(_) | E::UnknownHead(_) | E::TooFewHeads { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Pre-serialized JSON body, passed through byte for byte.
fn raw_json(status: StatusCode, body: String) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

fn param<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str) -> ApiResult<Option<T>> {
    q.get(key)
        .map(|v| v.parse().map_err(|_| ApiError::bad_request(format!("bad query parameter {key}={v:?}"))))
        .transpose()
}

fn required<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str) -> ApiResult<T> {
    param(q, key)?.ok_or_else(|| ApiError::bad_request(format!("missing query parameter {key}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

impl Inner {
    fn dataset(&self, split: Option<&str>) -> ApiResult<&Arc<Dataset>> {
        let name = split.unwrap_or(&self.split);
        self.datasets
            .get(name)
            .ok_or_else(|| ApiError::not_found(format!("unknown split {name:?}")))
    }

    /// The named document, looked up in the loaded split first.
    fn find_doc(&self, id: &str, split: Option<&str>) -> ApiResult<(String, Document)> {
        if let Some(s) = split {
            let ds = self.dataset(Some(s))?;
            return ds
                .get(id)
                .map(|d| (s.to_string(), d.clone()))
                .ok_or_else(|| ApiError::not_found(format!("unknown document {id:?}")));
        }
        let order = std::iter::once(&self.split).chain(self.datasets.keys().filter(|k| **k != self.split));
        for s in order {
            if let Some(d) = self.datasets[s].get(id) {
                return Ok((s.clone(), d.clone()));
            }
        }
        Err(ApiError::not_found(format!("unknown document {id:?}")))
    }

    fn trace(&self, split: &str, doc: &Document) -> ApiResult<Arc<ForwardTrace>> {
        let key = (split.to_string(), doc.id.clone());
        if let Some(t) = self.traces.lock().unwrap().get(&key) {
            return Ok(t.clone());
        }
        let t = Arc::new(self.model.analyze(doc)?);
        self.traces.lock().unwrap().insert(key, t.clone());
        Ok(t)
    }

    fn tokens(&self, split: &str, doc: &Document) -> Vec<String> {
        let vocab = &self.datasets[split].vocab;
        doc.flat.iter().map(|&t| vocab.token(t).to_string()).collect()
    }
}

async fn info(State(s): State<AppState>) -> Json<serde_json::Value> {
    let s = &s.0;
    let splits: BTreeMap<&str, usize> = s.datasets.iter().map(|(k, d)| (k.as_str(), d.len())).collect();
    Json(json!({
        "checkpoint": s.checkpoint,
        "split": s.split,
        "splits": splits,
        "model": s.model.config,
        "pal": s.model.pal,
        "assignments": s.model.assignments,
        "heads": s.model.heads(),
        "alpha": s.run.patterns.alpha,
        "methods": Method::ALL.iter().map(Method::as_str).collect::<Vec<_>>(),
    }))
}

#[derive(Serialize)]
struct DocSummary<'a> {
    id: &'a str,
    n_sentences: usize,
    n_tokens: usize,
}

async fn docs(State(s): State<AppState>, Query(q): Query<HashMap<String, String>>) -> ApiResult<Json<serde_json::Value>> {
    let ds = s.0.dataset(q.get("split").map(String::as_str))?;
    let docs: Vec<DocSummary> = ds
        .documents
        .iter()
        .map(|d| DocSummary {
            id: &d.id,
            n_sentences: d.n_sentences(),
            n_tokens: d.len(),
        })
        .collect();
    Ok(Json(json!({ "split": ds.split, "docs": docs })))
}

async fn doc(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<serde_json::Value>> {
    let (split, doc) = s.0.find_doc(&id, q.get("split").map(String::as_str))?;
    let state = s.clone();
    let (split2, doc2) = (split.clone(), doc.clone());
    let trace = blocking(move || state.0.trace(&split2, &doc2)).await?;
    let vocab = &s.0.datasets[&split].vocab;
    let decode = |ids: &[u32]| vocab.decode(ids);
    Ok(Json(json!({
        "id": doc.id,
        "split": split,
        "tokens": s.0.tokens(&split, &doc),
        "spans": doc.spans,
        "sentences": doc.sentences.iter().map(|t| decode(t)).collect::<Vec<_>>(),
        "summary": doc.gold_summary.iter().map(|t| decode(t)).collect::<Vec<_>>(),
        "labels": doc.oracle_labels,
        "scores": trace.logits,
    })))
}

/// The CLI `importance` report text for the loaded split.
pub fn importance_text(model: &Model, dataset: &Dataset, method: Method) -> headwise::Result<String> {
    Ok(headwise::to_json(&importance::estimate(model, dataset, method)?))
}

/// The CLI `gr` report text for the loaded split.
pub fn relevance_text(model: &Model, dataset: &Dataset, pattern: &PatternSpec, alpha: f64) -> headwise::Result<String> {
    Ok(headwise::to_json(&gr_dataset(model, dataset, pattern, alpha)?))
}

async fn importance_report(State(s): State<AppState>, Query(q): Query<HashMap<String, String>>) -> ApiResult<Response> {
    let method: Method = param(&q, "method")?.unwrap_or(Method::LeaveOneOut);
    let ds = s.0.dataset(q.get("split").map(String::as_str))?.clone();
    let key = (ds.split.clone(), method);
    if let Some(text) = s.0.importance.lock().unwrap().get(&key) {
        return Ok(raw_json(StatusCode::OK, text.to_string()));
    }
    let model = s.0.model.clone();
    let text = Arc::new(blocking(move || Ok(importance_text(&model, &ds, method)?)).await?);
    s.0.importance.lock().unwrap().insert(key, text.clone());
    Ok(raw_json(StatusCode::OK, text.to_string()))
}

async fn attention(State(s): State<AppState>, Query(q): Query<HashMap<String, String>>) -> ApiResult<Json<serde_json::Value>> {
    let id: String = required(&q, "doc")?;
    let layer: usize = required(&q, "layer")?;
    let head: usize = required(&q, "head")?;
    let family: HeadFamily = param(&q, "family")?.unwrap_or(HeadFamily::Encoder);
    let h = HeadId { layer, family, head };
    if !s.0.model.has_head(h) {
        return Err(ApiError::not_found(format!("unknown head {h}")));
    }
    let (split, doc) = s.0.find_doc(&id, q.get("split").map(String::as_str))?;
    let state = s.clone();
    let (split2, doc2) = (split.clone(), doc.clone());
    let trace = blocking(move || state.0.trace(&split2, &doc2)).await?;
    let alpha = trace.attention(h).expect("head checked above");
    let matrix: Vec<&[f64]> = (0..alpha.rows).map(|r| alpha.row(r)).collect();
    Ok(Json(json!({
        "doc": doc.id,
        "split": split,
        "layer": layer,
        "head": head,
        "family": family,
        "tokens": s.0.tokens(&split, &doc),
        "matrix": matrix,
    })))
}

async fn list_patterns(State(s): State<AppState>) -> Json<serde_json::Value> {
    let session = s.0.session.lock().unwrap();
    Json(json!({ "patterns": session.patterns.values().collect::<Vec<_>>() }))
}

async fn register_pattern(State(s): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let spec: PatternSpec = parse_body(&body)?;
    spec.validate()?;
    let mut session = s.0.session.lock().unwrap();
    let status = match session.patterns.get(&spec.name) {
        Some(existing) if *existing == spec => StatusCode::OK,
        Some(_) => {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("pattern {:?} is registered with a different definition", spec.name),
            ))
        }
        None => StatusCode::CREATED,
    };
    session.patterns.insert(spec.name.clone(), spec.clone());
    Ok((status, Json(spec)).into_response())
}

async fn evaluate_pattern(State(s): State<AppState>, UrlPath(name): UrlPath<String>) -> ApiResult<Response> {
    let spec = s
        .0
        .session
        .lock()
        .unwrap()
        .patterns
        .get(&name)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("unknown pattern {name:?}")))?;
    let id = {
        let mut jobs = s.0.jobs.lock().unwrap();
        if let Some(running) = jobs.running {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("job {running} is still running"),
            ));
        }
        jobs.next += 1;
        let id = jobs.next;
        jobs.running = Some(id);
        jobs.all.insert(id, Job::Running);
        id
    };
    let state = s.clone();
    tokio::task::spawn_blocking(move || {
        let inner = &state.0;
        let ds = &inner.datasets[&inner.split];
        let outcome = match relevance_text(&inner.model, ds, &spec, inner.run.patterns.alpha) {
            Ok(text) => Job::Done(Arc::new(text)),
            Err(e) => Job::Failed(e.to_string()),
        };
        let mut jobs = inner.jobs.lock().unwrap();
        jobs.all.insert(id, outcome);
        jobs.running = None;
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "id": id, "status": "running" }))).into_response())
}

/// `{"id", "status", "result"?, "error"?}`; `result` is the `gr` report
/// text, spliced in verbatim.
async fn job(State(s): State<AppState>, UrlPath(id): UrlPath<u64>) -> ApiResult<Response> {
    let job = s
        .0
        .jobs
        .lock()
        .unwrap()
        .all
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("unknown job {id}")))?;
    Ok(match job {
        Job::Running => Json(json!({ "id": id, "status": "running" })).into_response(),
        Job::Failed(e) => Json(json!({ "id": id, "status": "failed", "error": e })).into_response(),
        Job::Done(text) => raw_json(
            StatusCode::OK,
            format!("{{\"id\":{id},\"status\":\"done\",\"result\":{text}}}"),
        ),
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InjectionBody {
    assignments: Vec<HeadAssignment>,
}

async fn get_injection(State(s): State<AppState>) -> Json<serde_json::Value> {
    let session = s.0.session.lock().unwrap();
    Json(json!({
        "path": s.0.injection_path.display().to_string(),
        "assignments": session.injection,
    }))
}

/// The run configuration a trainer consumes: the session's config with the
/// posted encoder-head assignments.
pub fn injection_config(run: &RunConfig, base: &Path, model: &Model, assignments: Vec<HeadAssignment>) -> RunConfig {
    let mut out = run.with_absolute_paths(base);
    out.model = model.config;
    out.patterns.assignments = assignments;
    out
}

async fn post_injection(State(s): State<AppState>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let body: InjectionBody = parse_body(&body)?;
    let inner = &s.0;
    let mut session = inner.session.lock().unwrap();
    let mut seen = std::collections::BTreeSet::new();
    for a in &body.assignments {
        match session.patterns.get(&a.pattern.name) {
            Some(p) if *p == a.pattern => {}
            _ => return Err(ApiError::bad_request(format!("pattern {:?} is not registered", a.pattern.name))),
        }
        if a.family != HeadFamily::Encoder {
            return Err(ApiError::bad_request("injection assignments target encoder heads"));
        }
        let c = inner.model.config;
        if a.layer >= c.n_layers || a.head >= c.n_heads {
            return Err(ApiError::bad_request(format!("unknown head {}", a.head_id())));
        }
        if !seen.insert(a.head_id()) {
            return Err(ApiError::bad_request(format!("head {} assigned twice", a.head_id())));
        }
    }
    let config = injection_config(&inner.run, &inner.base_dir, &inner.model, body.assignments.clone());
    config.validate()?;
    std::fs::write(&inner.injection_path, config.to_toml())
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("{}: {e}", inner.injection_path.display())))?;
    session.injection = body.assignments;
    Ok(Json(json!({
        "path": inner.injection_path.display().to_string(),
        "assignments": session.injection,
    })))
}

fn run_dirs(root: &Path) -> ApiResult<Vec<String>> {
    let entries = std::fs::read_dir(root)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("{}: {e}", root.display())))?;
    let mut ids: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("run_log.json").is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    ids.sort();
    Ok(ids)
}

async fn runs(State(s): State<AppState>) -> ApiResult<Json<serde_json::Value>> {
    let Some(root) = &s.0.runs_dir else {
        return Ok(Json(json!({ "runs": [] })));
    };
    let mut out = Vec::new();
    for id in run_dirs(root)? {
        let text = std::fs::read_to_string(root.join(&id).join("run_log.json")).unwrap_or_default();
        let log: serde_json::Value = serde_json::from_str(&text).unwrap_or(serde_json::Value::Null);
        out.push(json!({
            "id": id,
            "best_step": log.get("best_step"),
            "steps": log.pointer("/train/steps"),
        }));
    }
    Ok(Json(json!({ "runs": out })))
}

async fn run(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let root = s.0.runs_dir.as_ref().ok_or_else(|| ApiError::not_found("no runs directory"))?;
    if !run_dirs(root)?.contains(&id) {
        return Err(ApiError::not_found(format!("unknown run {id:?}")));
    }
    let text = std::fs::read_to_string(root.join(&id).join("run_log.json"))
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(raw_json(StatusCode::OK, text))
}
