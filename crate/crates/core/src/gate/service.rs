//! HTTP surface of the gate: score and gate prompts over JSON, report
//! health, and hot-swap the estimator snapshot without dropping requests.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{GateDecision, GateError};
use crate::estimator::Scorer;

type Reloader = Box<dyn Fn() -> Result<Arc<dyn Scorer>, String> + Send + Sync>;

/// Shared state of a running gate. The estimator lives behind a lock so a
/// reload can swap the snapshot atomically between requests.
pub struct GateService {
    scorer: RwLock<Arc<dyn Scorer>>,
    threshold: f64,
    decision_log: Option<Mutex<std::fs::File>>,
    auth_token: Option<String>,
    reloader: Option<Reloader>,
}

impl GateService {
    pub fn new(threshold: f64, scorer: Arc<dyn Scorer>) -> Result<Self, GateError> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(GateError::InvalidThreshold(threshold));
        }
        Ok(GateService {
            scorer: RwLock::new(scorer),
            threshold,
            decision_log: None,
            auth_token: None,
            reloader: None,
        })
    }

    /// Require `Authorization: Bearer <token>` on scoring endpoints.
    pub fn with_auth_token(mut self, token: Option<String>) -> Self {
        self.auth_token = token;
        self
    }

    /// Append every decision to a JSONL log for offline rejection-rate and
    /// resubmission analysis. Prompts are logged as hashes, not text.
    pub fn with_decision_log(mut self, path: &Path) -> Result<Self, GateError> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| GateError::Io {
                path: path.display().to_string(),
                source,
            })?;
        self.decision_log = Some(Mutex::new(file));
        Ok(self)
    }

    /// Install the closure used by `/v1/reload` to build a fresh estimator.
    pub fn with_reloader(mut self, reloader: Reloader) -> Self {
        self.reloader = Some(reloader);
        self
    }

    /// Reload an estimator from a checkpoint on demand.
    pub fn with_checkpoint_reloader(self, path: PathBuf, vocab: crate::tokenizer::BpeVocab) -> Self {
        self.with_reloader(Box::new(move || {
            let (params, label) =
                crate::estimator::load_checkpoint(&path).map_err(|e| e.to_string())?;
            Ok(Arc::new(crate::estimator::TcqeScorer::new(
                params,
                vocab.clone(),
                label,
            )))
        }))
    }

    pub fn estimator_id(&self) -> String {
        self.scorer.read().expect("scorer lock").id()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    fn snapshot(&self) -> Arc<dyn Scorer> {
        self.scorer.read().expect("scorer lock").clone()
    }

    /// Gate one prompt against the current snapshot; fails open on estimator
    /// errors.
    pub fn decide(&self, prompt: &str) -> GateDecision {
        let decision = match self.snapshot().score(prompt) {
            Ok(score) => GateDecision {
                rejected: score < self.threshold,
                score: Some(score),
                threshold: self.threshold,
                degraded: false,
            },
            Err(_) => GateDecision {
                rejected: false,
                score: None,
                threshold: self.threshold,
                degraded: true,
            },
        };
        self.log_decision(prompt, &decision);
        decision
    }

    fn log_decision(&self, prompt: &str, decision: &GateDecision) {
        let Some(log) = &self.decision_log else { return };
        let ts_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        let line = json!({
            "ts_ms": ts_ms,
            "prompt_sha256": format!("{:x}", Sha256::digest(prompt.as_bytes())),
            "score": decision.score,
            "threshold": decision.threshold,
            "rejected": decision.rejected,
            "degraded": decision.degraded,
        });
        if let Ok(mut file) = log.lock() {
            let _ = writeln!(file, "{line}");
        }
    }

    fn reload(&self) -> Result<String, String> {
        let reloader = self.reloader.as_ref().ok_or("no reloader configured")?;
        let fresh = reloader()?;
        let id = fresh.id();
        *self.scorer.write().expect("scorer lock") = fresh;
        Ok(id)
    }

    fn authorized(&self, headers: &HeaderMap) -> bool {
        match &self.auth_token {
            None => true,
            Some(token) => headers
                .get(axum::http::header::AUTHORIZATION)
                .and_then(|v| v.to_str().ok())
                .is_some_and(|v| v == format!("Bearer {token}")),
        }
    }
}

#[derive(Deserialize)]
struct PromptRequest {
    prompt: String,
}

#[derive(Serialize)]
struct ScoreResponse {
    score: Option<f64>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    degraded: bool,
}

#[derive(Serialize)]
struct GateResponse {
    score: Option<f64>,
    rejected: bool,
    threshold: f64,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    degraded: bool,
}

type ApiError = (StatusCode, Json<serde_json::Value>);

fn bad_request(reason: String) -> ApiError {
    (StatusCode::BAD_REQUEST, Json(json!({ "error": reason })))
}

fn unauthorized() -> ApiError {
    (
        StatusCode::UNAUTHORIZED,
        Json(json!({ "error": "missing or invalid bearer token" })),
    )
}

async fn gated_prompt(
    state: &Arc<GateService>,
    headers: &HeaderMap,
    payload: Result<Json<PromptRequest>, JsonRejection>,
) -> Result<GateDecision, ApiError> {
    if !state.authorized(headers) {
        return Err(unauthorized());
    }
    let Json(request) = payload.map_err(|e| bad_request(e.body_text()))?;
    let service = state.clone();
    tokio::task::spawn_blocking(move || service.decide(&request.prompt))
        .await
        .map_err(|e| bad_request(format!("scoring task failed: {e}")))
}

async fn score_handler(
    State(state): State<Arc<GateService>>,
    headers: HeaderMap,
    payload: Result<Json<PromptRequest>, JsonRejection>,
) -> Result<Json<ScoreResponse>, ApiError> {
    let decision = gated_prompt(&state, &headers, payload).await?;
    Ok(Json(ScoreResponse {
        score: decision.score,
        degraded: decision.degraded,
    }))
}

async fn gate_handler(
    State(state): State<Arc<GateService>>,
    headers: HeaderMap,
    payload: Result<Json<PromptRequest>, JsonRejection>,
) -> Result<Json<GateResponse>, ApiError> {
    let decision = gated_prompt(&state, &headers, payload).await?;
    Ok(Json(GateResponse {
        score: decision.score,
        rejected: decision.rejected,
        threshold: decision.threshold,
        degraded: decision.degraded,
    }))
}

async fn health_handler(State(state): State<Arc<GateService>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "estimator": state.estimator_id(),
        "threshold": state.threshold(),
    }))
}

async fn reload_handler(
    State(state): State<Arc<GateService>>,
    headers: HeaderMap,
) -> Result<Json<serde_json::Value>, ApiError> {
    if !state.authorized(&headers) {
        return Err(unauthorized());
    }
    match state.reload() {
        Ok(id) => Ok(Json(json!({ "status": "reloaded", "estimator": id }))),
        Err(reason) => Err(bad_request(reason)),
    }
}

pub fn router(service: Arc<GateService>) -> Router {
    Router::new()
        .route("/v1/score", post(score_handler))
        .route("/v1/gate", post(gate_handler))
        .route("/v1/health", get(health_handler))
        .route("/v1/reload", post(reload_handler))
        .with_state(service)
}

/// A running gate service; dropping the handle aborts it, `shutdown` drains
/// in-flight requests first.
pub struct ServeHandle {
    pub addr: std::net::SocketAddr,
    shutdown: tokio::sync::oneshot::Sender<()>,
    task: tokio::task::JoinHandle<()>,
}

impl ServeHandle {
    pub async fn shutdown(self) {
        let _ = self.shutdown.send(());
        let _ = self.task.await;
    }
}

/// Bind and serve the gate. `bind` may use port 0 to pick a free port; the
/// resolved address is on the handle.
pub async fn serve(service: Arc<GateService>, bind: &str) -> Result<ServeHandle, GateError> {
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|source| GateError::Bind {
            addr: bind.to_string(),
            source,
        })?;
    let addr = listener.local_addr().map_err(|source| GateError::Bind {
        addr: bind.to_string(),
        source,
    })?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let app = router(service);
    let task = tokio::spawn(async move {
        let _ = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
    });
    Ok(ServeHandle {
        addr,
        shutdown: tx,
        task,
    })
}
