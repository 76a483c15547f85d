//! Read-only JSON-over-HTTP inference service over a transformer checkpoint.
//!
//! | route | method | body |
//! |---|---|---|
//! | `/v1/health` | GET | |
//! | `/v1/model` | GET | |
//! | `/v1/vocab?q=&limit=` | GET | |
//! | `/v1/predict` | POST | `{"tokens": [...], "top_k": 5}` |
//! | `/v1/mcq` | POST | `{"history": [...], "options": ["C001", ...]}` |
//! | `/v1/saliency` | POST | `{"history": [...], "target": "C001"?, "mode": "gradient"?}` |
//!
//! Malformed JSON answers 400 and unknown tokens 422, both with
//! `{"error": code, "detail": text}`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::model::{next_disorder_distribution, ModelError, Transformer};
use crate::probe::{mcq_rank, saliency, ProbeError, SaliencyMode, SaliencyTarget};
use crate::timeline::{read_vocab, TokenKind, TokenLine, Vocab};
use crate::training::{Checkpoint, Manifest};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    /// Tab-separated `code<TAB>label` lines.
    pub labels: Option<PathBuf>,
    /// Static files served for unmatched GET paths.
    pub static_dir: Option<PathBuf>,
    pub bind: String,
    pub max_options: usize,
    pub max_context: usize,
    pub body_limit: usize,
}

impl ServiceConfig {
    pub fn new(checkpoint: impl Into<PathBuf>, vocab: impl Into<PathBuf>) -> Self {
        Self {
            checkpoint: checkpoint.into(),
            vocab: vocab.into(),
            labels: None,
            static_dir: None,
            bind: "127.0.0.1:8080".into(),
            max_options: 10,
            max_context: 50,
            body_limit: 64 * 1024,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("cannot load {path}: {detail}")]
    Load { path: PathBuf, detail: String },
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("server: {0}")]
    Serve(std::io::Error),
}

/// Everything a request needs; immutable after startup.
pub struct AppState {
    pub model: Transformer,
    pub manifest: Manifest,
    pub vocab: Vocab,
    pub labels: HashMap<String, String>,
    pub max_options: usize,
    pub max_context: usize,
}

pub fn parse_labels(text: &str) -> HashMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('\t'))
        .map(|(code, label)| (code.trim().to_string(), label.trim().to_string()))
        .collect()
}

impl AppState {
    /// Loads the checkpoint, vocabulary and optional labels. The vocabulary
    /// hash must match the checkpoint's.
    pub fn load(config: &ServiceConfig) -> Result<Self, ServiceError> {
        let load_err = |path: &Path, detail: String| ServiceError::Load { path: path.to_path_buf(), detail };
        let vocab = read_vocab(&config.vocab).map_err(|e| load_err(&config.vocab, e.to_string()))?;
        let ckpt = Checkpoint::load(&config.checkpoint, Some(&vocab.hash()))
            .map_err(|e| load_err(&config.checkpoint, e.to_string()))?;
        let model = Transformer::from_checkpoint(&ckpt, None).map_err(|e| load_err(&config.checkpoint, e.to_string()))?;
        if model.config.vocab_size != vocab.len() {
            return Err(load_err(&config.checkpoint, format!("model vocabulary {} != {}", model.config.vocab_size, vocab.len())));
        }
        let labels = match &config.labels {
            Some(p) => parse_labels(&std::fs::read_to_string(p).map_err(|e| load_err(p, e.to_string()))?),
            None => HashMap::new(),
        };
        Ok(Self {
            model,
            manifest: ckpt.manifest,
            vocab,
            labels,
            max_options: config.max_options,
            max_context: config.max_context,
        })
    }

    fn label(&self, code: &str) -> Option<String> {
        self.labels.get(code).cloned()
    }

    fn concept(&self, id: usize, probability: Option<f64>) -> Concept {
        let code = self.vocab.entry(id).value.clone();
        Concept { label: self.label(&code), concept: code, probability }
    }

    fn resolve(&self, tokens: &[TokenLine]) -> Result<Vec<usize>, ApiError> {
        if tokens.is_empty() {
            return Err(ApiError::unprocessable("empty_context", "at least one token is required"));
        }
        let max = self.max_context.min(self.model.config.max_seq);
        if tokens.len() > max {
            return Err(ApiError::unprocessable("context_too_long", format!("{} tokens, at most {max}", tokens.len())));
        }
        tokens
            .iter()
            .map(|t| {
                self.vocab.lookup(t.kind, &t.value).ok_or_else(|| {
                    let code = if t.kind == TokenKind::Concept { "unknown_concept" } else { "unknown_token" };
                    ApiError::unprocessable(code, format!("{} {} is not in the vocabulary", t.kind, t.value))
                })
            })
            .collect()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    detail: String,
}

impl ApiError {
    fn bad_request(code: &'static str, detail: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, code, detail: detail.into() }
    }

    fn unprocessable(code: &'static str, detail: impl Into<String>) -> Self {
        Self { status: StatusCode::UNPROCESSABLE_ENTITY, code, detail: detail.into() }
    }

    fn internal(detail: impl Into<String>) -> Self {
        Self { status: StatusCode::INTERNAL_SERVER_ERROR, code: "internal", detail: detail.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.code, "detail": self.detail}))).into_response()
    }
}

impl From<ProbeError> for ApiError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::UnknownOption(_) | ProbeError::NotAConcept(_) => Self::unprocessable("unknown_concept", e.to_string()),
            ProbeError::UnknownToken { .. } => Self::unprocessable("unknown_token", e.to_string()),
            ProbeError::EmptyContext => Self::unprocessable("empty_context", e.to_string()),
            ProbeError::DuplicateOption(_) | ProbeError::OptionCount(_) => Self::unprocessable("invalid_options", e.to_string()),
            ProbeError::Model(m) => m.into(),
            ProbeError::Numerics(n) => Self::internal(n.to_string()),
        }
    }
}

impl From<ModelError> for ApiError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Overlength { .. } => Self::unprocessable("context_too_long", e.to_string()),
            ModelError::EmptyContext => Self::unprocessable("empty_context", e.to_string()),
            _ => Self::internal(e.to_string()),
        }
    }
}

/// JSON body parsed with serde so that every failure maps to a 400 object.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request("malformed_json", e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub concept: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictRequest {
    tokens: Vec<TokenLine>,
    #[serde(default = "default_top_k")]
    top_k: usize,
}

fn default_top_k() -> usize {
    5
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct McqRequest {
    history: Vec<TokenLine>,
    options: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SaliencyRequest {
    history: Vec<TokenLine>,
    #[serde(default)]
    target: Option<String>,
    #[serde(default)]
    mode: SaliencyMode,
}

#[derive(Debug, Deserialize)]
struct VocabQuery {
    #[serde(default)]
    q: String,
    #[serde(default = "default_limit")]
    limit: usize,
}

fn default_limit() -> usize {
    20
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({"status": "ok"}))
}

async fn model_info(State(s): State<Arc<AppState>>) -> Json<Manifest> {
    Json(s.manifest.clone())
}

/// Case-insensitive substring match over codes and labels, most frequent first.
pub fn vocab_search(state: &AppState, query: &str, limit: usize) -> Vec<serde_json::Value> {
    let q = query.to_lowercase();
    state.vocab.entries()[..state.vocab.n_concepts()]
        .iter()
        .filter(|e| {
            q.is_empty()
                || e.value.to_lowercase().contains(&q)
                || state.label(&e.value).is_some_and(|l| l.to_lowercase().contains(&q))
        })
        .take(limit)
        .map(|e| {
            let mut row = json!({"concept": e.value, "frequency": e.frequency});
            if let Some(l) = state.label(&e.value) {
                row["label"] = json!(l);
            }
            row
        })
        .collect()
}

async fn vocab(State(s): State<Arc<AppState>>, Query(q): Query<VocabQuery>) -> Json<serde_json::Value> {
    Json(json!({"results": vocab_search(&s, &q.q, q.limit)}))
}

async fn predict(State(s): State<Arc<AppState>>, body: Bytes) -> Result<Json<serde_json::Value>, ApiError> {
    let req: PredictRequest = parse_body(&body)?;
    let ids = s.resolve(&req.tokens)?;
    if req.top_k == 0 {
        return Err(ApiError::unprocessable("invalid_top_k", "top_k must be positive"));
    }
    let p = next_disorder_distribution(&s.model, s.vocab.n_concepts(), &ids)?;
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let candidates: Vec<Concept> = order.into_iter().take(req.top_k).map(|c| s.concept(c, Some(p[c]))).collect();
    Ok(Json(json!({"candidates": candidates})))
}

async fn mcq(State(s): State<Arc<AppState>>, body: Bytes) -> Result<Json<serde_json::Value>, ApiError> {
    let req: McqRequest = parse_body(&body)?;
    let history = s.resolve(&req.history)?;
    if req.options.is_empty() || req.options.len() > s.max_options {
        return Err(ApiError::unprocessable(
            "invalid_options",
            format!("{} options given; between 1 and {} are allowed", req.options.len(), s.max_options),
        ));
    }
    let options = req
        .options
        .iter()
        .map(|o| s.vocab.concept_id(o).ok_or_else(|| ApiError::unprocessable("unknown_concept", format!("CONCEPT {o} is not in the vocabulary"))))
        .collect::<Result<Vec<_>, _>>()?;
    let ranked = mcq_rank(&s.model, s.vocab.n_concepts(), &history, &options)?;
    let options: Vec<Concept> = ranked.into_iter().map(|(c, p)| s.concept(c, Some(p))).collect();
    Ok(Json(json!({"options": options})))
}

async fn saliency_route(State(s): State<Arc<AppState>>, body: Bytes) -> Result<Json<serde_json::Value>, ApiError> {
    let req: SaliencyRequest = parse_body(&body)?;
    let history = s.resolve(&req.history)?;
    let target = match &req.target {
        Some(code) => SaliencyTarget::Concept(
            s.vocab
                .concept_id(code)
                .ok_or_else(|| ApiError::unprocessable("unknown_concept", format!("CONCEPT {code} is not in the vocabulary")))?,
        ),
        None => SaliencyTarget::Argmax,
    };
    let r = saliency(&s.model, s.vocab.n_concepts(), &history, target, req.mode)?;
    Ok(Json(json!({
        "tokens": req.history,
        "weights": r.weights,
        "raw": r.raw,
        "target": s.concept(r.target, None),
        "log_prob": r.log_prob,
    })))
}

/// The API routes, plus a static file fallback when `static_dir` is given.
pub fn router(state: Arc<AppState>, static_dir: Option<&Path>, body_limit: usize) -> Router {
    let api = Router::new()
        .route("/v1/health", get(health))
        .route("/v1/model", get(model_info))
        .route("/v1/vocab", get(vocab))
        .route("/v1/predict", post(predict))
        .route("/v1/mcq", post(mcq))
        .route("/v1/saliency", post(saliency_route))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Loads the model and serves until Ctrl-C.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let state = Arc::new(AppState::load(&config)?);
    let app = router(state, config.static_dir.as_deref(), config.body_limit);
    let addr: SocketAddr = config
        .bind
        .parse()
        .map_err(|e| ServiceError::Bind { addr: config.bind.clone(), source: std::io::Error::other(e) })?;
    let listener =
        tokio::net::TcpListener::bind(addr).await.map_err(|source| ServiceError::Bind { addr: config.bind.clone(), source })?;
    eprintln!("listening on {}", listener.local_addr().map_err(ServiceError::Serve)?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(ServiceError::Serve)
}
