//! HTTP front end: sketch queries, thumbnails, health and config.

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use anyhow::{Context, Result};
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use sbir_core::data::StrokeSketch;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::config::AppConfig;
use crate::engine::Engine;

pub struct ServiceState {
    pub config: AppConfig,
    engine: OnceLock<std::result::Result<Arc<Engine>, String>>,
    embeds: Semaphore,
}

impl ServiceState {
    pub fn new(config: AppConfig) -> Self {
        let permits = config.service.max_concurrent_embeds.max(1);
        Self {
            config,
            engine: OnceLock::new(),
            embeds: Semaphore::new(permits),
        }
    }

    /// Records the outcome of loading; later calls are ignored.
    pub fn set_engine(&self, engine: Result<Engine>) {
        let _ = self.engine.set(engine.map(Arc::new).map_err(|e| format!("{e:#}")));
    }

    pub fn engine(&self) -> Option<&std::result::Result<Arc<Engine>, String>> {
        self.engine.get()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: msg.into() })).into_response()
}

fn ready(state: &ServiceState) -> std::result::Result<Arc<Engine>, Box<Response>> {
    match state.engine() {
        None => Err(Box::new(error(StatusCode::SERVICE_UNAVAILABLE, "model is loading"))),
        Some(Err(e)) => Err(Box::new(error(StatusCode::SERVICE_UNAVAILABLE, e.clone()))),
        Some(Ok(engine)) => Ok(engine.clone()),
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/query", post(query))
        .route("/image/{id}", get(image))
        .route("/health", get(health))
        .route("/config", get(config))
        .with_state(state)
}

#[derive(Debug, Deserialize)]
pub struct QueryParams {
    pub k: Option<usize>,
}

async fn query(State(state): State<Arc<ServiceState>>, Query(params): Query<QueryParams>, body: Bytes) -> Response {
    let k = params.k.unwrap_or(state.config.service.top_k);
    if k == 0 {
        return error(StatusCode::BAD_REQUEST, "k must be at least 1");
    }
    let sketch = match std::str::from_utf8(&body)
        .map_err(|e| e.to_string())
        .and_then(|s| StrokeSketch::from_json(s).map_err(|e| e.to_string()))
    {
        Ok(s) => s,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let engine = match ready(&state) {
        Ok(e) => e,
        Err(r) => return *r,
    };
    let Ok(_permit) = state.embeds.acquire().await else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "shutting down");
    };
    match tokio::task::spawn_blocking(move || engine.query(&sketch, k)).await {
        Ok(Ok(response)) => Json(response).into_response(),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("{e:#}")),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

fn content_type(path: &std::path::Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("json") => "application/json",
        _ => "application/octet-stream",
    }
}

async fn image(State(state): State<Arc<ServiceState>>, Path(id): Path<String>) -> Response {
    let engine = match ready(&state) {
        Ok(e) => e,
        Err(r) => return *r,
    };
    let Some(manifest) = &engine.manifest else {
        return error(StatusCode::NOT_FOUND, "no dataset manifest is loaded");
    };
    let Some(item) = manifest.get(&id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown id `{id}`"));
    };
    let path = manifest.resolve(item);
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(e) => error(StatusCode::NOT_FOUND, format!("{}: {e}", path.display())),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_fingerprint: String,
    pub index_fingerprint: String,
    pub entries: usize,
}

async fn health(State(state): State<Arc<ServiceState>>) -> Response {
    match ready(&state) {
        Ok(engine) => Json(Health {
            status: "ok".into(),
            model_fingerprint: engine.model_fingerprint.clone(),
            index_fingerprint: engine.index_fingerprint.clone(),
            entries: engine.index.len(),
        })
        .into_response(),
        Err(r) => *r,
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ServiceInfo {
    pub top_k: usize,
    pub dim: usize,
    pub scale: f32,
    pub preset: sbir_core::model::Preset,
    pub scheme: sbir_core::model::ShareMode,
    pub pairing: sbir_core::model::Pairing,
}

async fn config(State(state): State<Arc<ServiceState>>) -> Response {
    let engine = match ready(&state) {
        Ok(e) => e,
        Err(r) => return *r,
    };
    let m = &state.config.model;
    Json(ServiceInfo {
        top_k: state.config.service.top_k,
        dim: engine.net.embedding_dim(),
        scale: engine.net.query_scale,
        preset: m.preset,
        scheme: m.scheme,
        pairing: m.pairing,
    })
    .into_response()
}

/// Binds, loads the model in the background and serves until ctrl-c.
pub async fn serve(config: AppConfig, checkpoint: PathBuf, index: PathBuf) -> Result<()> {
    let addr = format!("{}:{}", config.service.host, config.service.port);
    let state = Arc::new(ServiceState::new(config));
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    log::info!("listening on http://{}", listener.local_addr()?);
    let loader = state.clone();
    tokio::task::spawn_blocking(move || {
        let engine = Engine::load(&loader.config, &checkpoint, &index);
        match &engine {
            Ok(e) => log::info!("loaded {} index entries", e.index.len()),
            Err(e) => log::error!("loading failed: {e:#}"),
        }
        loader.set_engine(engine);
    });
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        })
        .await?;
    Ok(())
}

pub fn serve_blocking(config: AppConfig, checkpoint: PathBuf, index: PathBuf) -> Result<()> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(serve(config, checkpoint, index))
}
