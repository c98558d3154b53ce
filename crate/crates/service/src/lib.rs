//! Compose service: `GET /layout`, `POST /compose`, `POST /sample`.
//!
//! The model state is loaded once and never mutated afterwards. Until it is
//! in place every model endpoint answers 503.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderName, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde_json::error::Category;
use stylemix_core::api::{ComposeContext, ComposeRequest, Directions, ErrorBody, SampleRequest};
use stylemix_core::checkpoint::Checkpoint;
use stylemix_core::error::Error;
use tokio::net::TcpListener;
use tower_http::cors::{Any, CorsLayer};

pub const TIMING_HEADER: &str = "x-timing-ms";

#[derive(Clone, Default)]
pub struct AppState {
    ctx: Arc<OnceLock<Arc<ComposeContext>>>,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn loaded(ctx: ComposeContext) -> Self {
        let state = Self::new();
        state.install(ctx);
        state
    }

    /// Installs the model; later calls are ignored.
    pub fn install(&self, ctx: ComposeContext) {
        let _ = self.ctx.set(Arc::new(ctx));
    }

    pub fn is_loaded(&self) -> bool {
        self.ctx.get().is_some()
    }

    fn get(&self) -> Result<Arc<ComposeContext>, ApiError> {
        self.ctx.get().cloned().ok_or(ApiError::NotLoaded)
    }
}

pub fn load_context(checkpoint: &Path, directions: Option<&Path>) -> stylemix_core::error::Result<ComposeContext> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let generator = ckpt.require_generator()?.clone();
    let model = ckpt.require_region_model()?.clone();
    let tree = ckpt.require_tree()?.clone();
    let directions = match directions {
        Some(dir) => Directions::load_dir(dir)?,
        None => Directions::default(),
    };
    ComposeContext::new(generator, model, tree, directions)
}

enum ApiError {
    NotLoaded,
    Core(Error),
    Body(serde_json::Error),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::NotLoaded => (
                StatusCode::SERVICE_UNAVAILABLE,
                ErrorBody {
                    error: "model is still loading".into(),
                    field: None,
                },
            ),
            ApiError::Core(e) => {
                let status = match &e {
                    Error::Request { .. } | Error::Input(_) => StatusCode::BAD_REQUEST,
                    Error::MalformedCode { .. } | Error::Shape(_) => StatusCode::UNPROCESSABLE_ENTITY,
                    _ => StatusCode::INTERNAL_SERVER_ERROR,
                };
                (status, ErrorBody::from_error(&e))
            }
            ApiError::Body(e) => {
                let status = match e.classify() {
                    Category::Data => StatusCode::UNPROCESSABLE_ENTITY,
                    _ => StatusCode::BAD_REQUEST,
                };
                (
                    status,
                    ErrorBody {
                        error: format!("invalid request body: {e}"),
                        field: Some("body".into()),
                    },
                )
            }
            ApiError::Internal(msg) => (StatusCode::INTERNAL_SERVER_ERROR, ErrorBody { error: msg, field: None }),
        };
        json_response(status, &body)
    }
}

fn json_response<T: serde::Serialize>(status: StatusCode, body: &T) -> Response {
    let bytes = serde_json::to_vec(body).expect("wire types serialize");
    (status, [(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))], bytes).into_response()
}

fn with_timing(mut resp: Response, start: Instant) -> Response {
    let ms = format!("{:.3}", start.elapsed().as_secs_f64() * 1e3);
    if let Ok(v) = HeaderValue::from_str(&ms) {
        resp.headers_mut().insert(HeaderName::from_static(TIMING_HEADER), v);
    }
    resp
}

fn parse<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(ApiError::Body)
}

async fn layout(State(state): State<AppState>) -> Result<Response, ApiError> {
    let ctx = state.get()?;
    Ok(json_response(StatusCode::OK, &ctx.layout()))
}

async fn compose(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let start = Instant::now();
    let ctx = state.get()?;
    let req: ComposeRequest = parse(&body)?;
    let resp = tokio::task::spawn_blocking(move || ctx.compose(&req))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map_err(ApiError::Core)?;
    Ok(with_timing(json_response(StatusCode::OK, &resp), start))
}

async fn sample(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let start = Instant::now();
    let ctx = state.get()?;
    let req: SampleRequest = parse(&body)?;
    let resp = stylemix_core::api::sample(&ctx.generator, &req).map_err(ApiError::Core)?;
    Ok(with_timing(json_response(StatusCode::OK, &resp), start))
}

async fn health(State(state): State<AppState>) -> Response {
    let status = if state.is_loaded() { "ready" } else { "loading" };
    json_response(StatusCode::OK, &serde_json::json!({ "status": status }))
}

pub fn router(state: AppState) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers(Any)
        .expose_headers([HeaderName::from_static(TIMING_HEADER)]);
    Router::new()
        .route("/health", get(health))
        .route("/layout", get(layout))
        .route("/compose", post(compose))
        .route("/sample", post(sample))
        .layer(cors)
        .with_state(state)
}

/// Serves `state` on `addr` in a background task; returns the bound address.
pub async fn spawn(addr: SocketAddr, state: AppState) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let handle = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, router(state)).await {
            tracing::error!(error = %e, "server stopped");
        }
    });
    Ok((local, handle))
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub addr: SocketAddr,
    pub checkpoint: PathBuf,
    pub directions: Option<PathBuf>,
}

/// Binds, starts answering immediately and loads the checkpoint in the
/// background.
pub async fn serve(config: ServeConfig) -> std::io::Result<()> {
    let listener = TcpListener::bind(config.addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "compose service listening");
    let state = AppState::new();
    let loader = state.clone();
    let (ckpt, dirs) = (config.checkpoint.clone(), config.directions.clone());
    let load = tokio::task::spawn_blocking(move || load_context(&ckpt, dirs.as_deref()));
    tokio::spawn(async move {
        match load.await {
            Ok(Ok(ctx)) => {
                loader.install(ctx);
                tracing::info!("checkpoint loaded");
            }
            Ok(Err(e)) => {
                tracing::error!(error = %e, "checkpoint failed to load");
                std::process::exit(2);
            }
            Err(e) => tracing::error!(error = %e, "loader panicked"),
        }
    });
    axum::serve(listener, router(state)).await
}
