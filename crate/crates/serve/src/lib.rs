//! HTTP recognition service.
//!
//! Frames are POSTed as whole PPM or PNG images; each result passes through
//! a per-session debounce (see [`SessionState`]) keyed by the `X-Session`
//! header. Food records and portion-scaled nutrition come from a
//! [`FoodStore`].

mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use foodlens_core::data::{preprocess_bytes, Codec};
use foodlens_core::layers::Mode;
use foodlens_core::nutrition::{FoodStore, NutritionError};
use foodlens_core::zoo::{load_checkpoint, Model};
use foodlens_core::Tensor;
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

pub use session::{SessionState, Transition};

pub const SESSION_HEADER: &str = "x-session";
pub const UNKNOWN_CLASS: &str = "unknown";

/// Anything that maps one preprocessed `[3, 64, 64]` frame to class
/// probabilities.
pub trait FrameClassifier: Send + Sync {
    fn model_name(&self) -> String;
    fn class_names(&self) -> &[String];
    fn probabilities(&self, frame: &Tensor<f32>) -> Result<Vec<f32>, String>;
}

/// A trained network in eval mode.
pub struct ModelClassifier {
    model: Model<f32>,
}

impl ModelClassifier {
    pub fn new(mut model: Model<f32>) -> Self {
        model.set_mode(Mode::Eval);
        Self { model }
    }
}

impl FrameClassifier for ModelClassifier {
    fn model_name(&self) -> String {
        self.model.name()
    }

    fn class_names(&self) -> &[String] {
        self.model.class_names()
    }

    fn probabilities(&self, frame: &Tensor<f32>) -> Result<Vec<f32>, String> {
        let batch = frame.clone().reshape([&[1], frame.shape()].concat()).map_err(|e| e.to_string())?;
        let logits = self.model.logits(&batch).map_err(|e| e.to_string())?;
        let max = logits.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exp: Vec<f32> = logits.data().iter().map(|v| (v - max).exp()).collect();
        let sum: f32 = exp.iter().sum();
        Ok(exp.into_iter().map(|e| e / sum).collect())
    }
}

/// Highest-probability class, ties to the lowest index.
pub fn top_class(probs: &[f32]) -> (usize, f32) {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    (best, probs[best])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub threshold: f32,
    pub stability_k: usize,
    pub default_interval_ms: u64,
    pub session_idle_secs: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            threshold: 0.6,
            stability_k: 2,
            default_interval_ms: 500,
            session_idle_secs: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    /// `-1` when the frame is below the confidence threshold.
    pub class_id: i64,
    pub class_name: String,
    pub confidence: f32,
    pub stable: bool,
    pub reset: bool,
    pub consecutive_count: usize,
    pub latency_ms: f64,
    pub frame_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model: String,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigView {
    pub default_interval_ms: u64,
    pub threshold: f32,
    pub stability_k: usize,
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
    pub detail: String,
}

fn error(status: StatusCode, kind: &str, detail: impl Into<String>) -> Response {
    (
        status,
        Json(ApiError {
            error: kind.into(),
            detail: detail.into(),
        }),
    )
        .into_response()
}

type SessionMap = HashMap<String, Arc<tokio::sync::Mutex<SessionState>>>;

#[derive(Clone)]
pub struct AppState {
    classifier: Option<Arc<dyn FrameClassifier>>,
    store: Arc<FoodStore>,
    config: Arc<ServiceConfig>,
    sessions: Arc<Mutex<SessionMap>>,
}

impl AppState {
    pub fn new(classifier: Option<Arc<dyn FrameClassifier>>, store: FoodStore, config: ServiceConfig) -> Self {
        Self {
            classifier,
            store: Arc::new(store),
            config: Arc::new(config),
            sessions: Arc::new(Mutex::new(HashMap::new())),
        }
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session map").len()
    }

    /// Returns the session handle, creating it if needed, after dropping
    /// sessions idle longer than the configured window.
    fn session(&self, id: &str) -> Arc<tokio::sync::Mutex<SessionState>> {
        let idle = Duration::from_secs(self.config.session_idle_secs);
        let mut map = self.sessions.lock().expect("session map");
        map.retain(|_, s| s.try_lock().map_or(true, |s| s.last_seen.elapsed() <= idle));
        map.entry(id.to_string())
            .or_insert_with(|| Arc::new(tokio::sync::Mutex::new(SessionState::new(id))))
            .clone()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/config", get(config))
        .route("/v1/classify", post(classify))
        .route("/v1/foods/{name}", get(food))
        .route("/v1/foods/{name}/nutrition", get(nutrition))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

async fn health(State(s): State<AppState>) -> Response {
    match &s.classifier {
        Some(c) => Json(Health {
            status: "ok".into(),
            model: c.model_name(),
            classes: c.class_names().len(),
        })
        .into_response(),
        None => error(StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded", "no model is loaded"),
    }
}

async fn config(State(s): State<AppState>) -> Json<ConfigView> {
    Json(ConfigView {
        default_interval_ms: s.config.default_interval_ms,
        threshold: s.config.threshold,
        stability_k: s.config.stability_k,
        classes: s.classifier.as_ref().map(|c| c.class_names().to_vec()).unwrap_or_default(),
    })
}

async fn classify(State(s): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    let start = Instant::now();
    let Some(classifier) = s.classifier.clone() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded", "no model is loaded");
    };
    let codec = match headers.get("content-type").and_then(|v| v.to_str().ok()) {
        Some(ct) => Codec::from_mime(ct).or_else(|| ct.starts_with("application/octet-stream").then(|| Codec::sniff(&body)).flatten()),
        None => Codec::sniff(&body),
    };
    let Some(codec) = codec else {
        return error(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            "unsupported_media_type",
            "send image/x-portable-pixmap or image/png",
        );
    };
    let session = headers
        .get(SESSION_HEADER)
        .and_then(|v| v.to_str().ok())
        .filter(|v| !v.is_empty())
        .map(|id| s.session(id));
    // frames of one session are classified in arrival order
    let mut guard = match &session {
        Some(h) => Some(h.clone().lock_owned().await),
        None => None,
    };
    let inference = tokio::task::spawn_blocking(move || {
        let frame = preprocess_bytes(&body, codec).map_err(|e| (true, e))?;
        classifier.probabilities(&frame).map_err(|e| (false, e))
    })
    .await;
    let probs = match inference {
        Ok(Ok(p)) => p,
        Ok(Err((true, e))) => return error(StatusCode::BAD_REQUEST, "decode_error", e),
        Ok(Err((false, e))) => return error(StatusCode::INTERNAL_SERVER_ERROR, "inference_error", e),
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, "inference_error", e.to_string()),
    };
    let (class, confidence) = top_class(&probs);
    let accepted = confidence >= s.config.threshold;
    let (transition, frame_seq) = match guard.as_deref_mut() {
        Some(state) => {
            let t = state.observe(accepted.then_some(class), s.config.stability_k);
            (t, state.frames)
        }
        None => (
            Transition {
                stable: accepted,
                reset: false,
                consecutive_count: usize::from(accepted),
            },
            0,
        ),
    };
    let names = s.classifier.as_ref().expect("checked above").class_names();
    Json(ClassificationResult {
        class_id: if accepted { class as i64 } else { -1 },
        class_name: if accepted { names[class].clone() } else { UNKNOWN_CLASS.into() },
        confidence,
        stable: transition.stable,
        reset: transition.reset,
        consecutive_count: transition.consecutive_count,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
        frame_seq,
    })
    .into_response()
}

fn store_error(e: NutritionError) -> Response {
    match e {
        NutritionError::UnknownFood(name) => error(StatusCode::NOT_FOUND, "unknown_food", format!("no record for `{name}`")),
        NutritionError::Argument(d) => error(StatusCode::BAD_REQUEST, "invalid_argument", d),
        other => error(StatusCode::INTERNAL_SERVER_ERROR, "store_error", other.to_string()),
    }
}

async fn food(State(s): State<AppState>, UrlPath(name): UrlPath<String>) -> Response {
    match s.store.get(&name) {
        Ok(r) => Json(r.clone()).into_response(),
        Err(e) => store_error(e),
    }
}

#[derive(Deserialize)]
struct PortionQuery {
    portion_g: Option<String>,
}

async fn nutrition(State(s): State<AppState>, UrlPath(name): UrlPath<String>, Query(q): Query<PortionQuery>) -> Response {
    let portion = match q.portion_g.as_deref().map(str::parse::<f64>) {
        None => 100.0,
        Some(Ok(p)) => p,
        Some(Err(_)) => return error(StatusCode::BAD_REQUEST, "invalid_argument", "portion_g must be a number"),
    };
    match s.store.nutrition_for_portion(&name, portion) {
        Ok(f) => Json(f).into_response(),
        Err(e) => store_error(e),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot load model: {0}")]
    Model(#[from] foodlens_core::zoo::ModelError),
    #[error("cannot load food store: {0}")]
    Store(#[from] NutritionError),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

/// Loads the checkpoint and store; `None` for the store selects the bundled
/// one.
pub fn load_state(checkpoint: &Path, store: Option<&Path>, config: ServiceConfig) -> Result<AppState, ServeError> {
    let model = load_checkpoint::<f32>(checkpoint)?;
    let store = match store {
        Some(p) => FoodStore::load(p)?,
        None => FoodStore::bundled(),
    };
    Ok(AppState::new(Some(Arc::new(ModelClassifier::new(model))), store, config))
}

/// Binds and serves until the process ends.
pub async fn serve(state: AppState) -> Result<(), ServeError> {
    let addr = state.config.bind;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServeError::Bind { addr, source })?;
    axum::serve(listener, router(state)).await?;
    Ok(())
}

/// Binds, then serves on a background task. Returns the bound address
/// (useful with port 0).
pub async fn spawn(state: AppState) -> Result<SocketAddr, ServeError> {
    let addr = state.config.bind;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServeError::Bind { addr, source })?;
    let local = listener.local_addr()?;
    tokio::spawn(async move {
        let _ = axum::serve(listener, router(state)).await;
    });
    Ok(local)
}
