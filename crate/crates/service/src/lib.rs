//! HTTP front end: real-time reset prediction, on-demand ground-truth
//! simulation and the furniture catalog.
//!
//! Routes:
//! - `POST /api/predict` with a layout document
//! - `POST /api/simulate` with `{layout, paths, seed}`
//! - `GET /api/catalog`
//! - `GET /healthz`

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use roomroam_core::layout::{Catalog, FurnitureSpec, LayoutDoc, LayoutError};
use roomroam_core::model::ModelError;
use roomroam_core::predict::Predictor;
use roomroam_core::rdwsim::{estimate_resets_until, ResetEstimate, SimConfig, SimError};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::Semaphore;
use tower_http::cors::CorsLayer;

pub const MODEL_ENV: &str = "ROOMROAM_MODEL";
pub const MAX_SIM_PATHS: u64 = 100;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot read model {path}: {source}")]
    ReadModel {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid model {path}: {source}")]
    Model { path: PathBuf, source: ModelError },
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

/// A model ready for inference plus the hash that identifies it.
#[derive(Debug)]
pub struct LoadedModel {
    pub predictor: Predictor,
    /// Hex SHA-256 of the model file.
    pub version: String,
}

impl LoadedModel {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        Ok(Self {
            predictor: Predictor::from_bytes(bytes)?,
            version: hex::encode(Sha256::digest(bytes)),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let bytes = std::fs::read(path).map_err(|source| ServiceError::ReadModel {
            path: path.to_owned(),
            source,
        })?;
        Self::from_bytes(&bytes).map_err(|source| ServiceError::Model {
            path: path.to_owned(),
            source,
        })
    }
}

/// `ROOMROAM_MODEL`, when set and non-empty, wins over the flag.
pub fn model_path(flag: Option<PathBuf>, env: Option<OsString>) -> Option<PathBuf> {
    env.filter(|v| !v.is_empty()).map(PathBuf::from).or(flag)
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub sim_workers: usize,
    pub time_budget: Duration,
    pub sim: SimConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            sim_workers: 2,
            time_budget: Duration::from_secs(30),
            sim: SimConfig::default(),
        }
    }
}

pub struct AppState {
    model: Option<LoadedModel>,
    catalog: Catalog,
    sim_slots: Semaphore,
    config: ServiceConfig,
}

impl AppState {
    pub fn new(model: Option<LoadedModel>, config: ServiceConfig) -> Self {
        Self {
            model,
            catalog: Catalog::default(),
            sim_slots: Semaphore::new(config.sim_workers.max(1)),
            config,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub predicted_resets: f64,
    pub heatmap: Vec<Vec<f64>>,
    pub model_version: String,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateRequest {
    pub layout: LayoutDoc,
    pub paths: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Health<'a> {
    pub status: &'static str,
    pub model_version: &'a str,
}

/// Error body `{code, message, detail}` with its status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub detail: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            detail: Value::Null,
        }
    }

    fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }

    fn no_model() -> Self {
        Self::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "model_not_loaded",
            "no model is loaded",
        )
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"code": self.code, "message": self.message, "detail": self.detail});
        (self.status, Json(body)).into_response()
    }
}

impl From<LayoutError> for ApiError {
    fn from(e: LayoutError) -> Self {
        match &e {
            LayoutError::Schema { path, .. } => {
                let path = path.clone();
                Self::new(StatusCode::BAD_REQUEST, "schema_violation", e.to_string())
                    .with_detail(json!({ "path": path }))
            }
            _ => Self::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "invalid_layout",
                e.to_string(),
            ),
        }
    }
}

fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ApiError::new(
            StatusCode::BAD_REQUEST,
            "schema_violation",
            format!("schema violation at `{path}`: {}", e.inner()),
        )
        .with_detail(json!({ "path": path }))
    })
}

async fn predict(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<Json<PredictResponse>, ApiError> {
    let start = Instant::now();
    if state.model.is_none() {
        return Err(ApiError::no_model());
    }
    let doc: LayoutDoc = parse(&body)?;
    let layout = doc.resolve(&state.catalog)?;
    let worker = state.clone();
    let prediction = tokio::task::spawn_blocking(move || {
        let model = worker.model.as_ref().expect("checked above");
        model.predictor.predict(&layout)
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(ApiError::internal)?;
    let model = state.model.as_ref().expect("checked above");
    Ok(Json(PredictResponse {
        predicted_resets: prediction.resets,
        heatmap: prediction.heatmap.values,
        model_version: model.version.clone(),
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
    }))
}

async fn simulate(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<Json<ResetEstimate>, ApiError> {
    let req: SimulateRequest = parse(&body)?;
    if !(1..=MAX_SIM_PATHS).contains(&req.paths) {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "paths_out_of_range",
            format!("paths must lie in 1..={MAX_SIM_PATHS}, got {}", req.paths),
        )
        .with_detail(json!({"path": "paths"})));
    }
    let layout = req.layout.resolve(&state.catalog)?;
    state.config.sim.validate_for(&layout).map_err(|e| {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_layout", e.to_string())
    })?;

    let budget = state.config.time_budget;
    let deadline = Instant::now() + budget;
    let timeout = || {
        ApiError::new(
            StatusCode::GATEWAY_TIMEOUT,
            "time_budget_exceeded",
            format!("simulation exceeded the {} ms budget", budget.as_millis()),
        )
    };
    let permit = tokio::time::timeout(budget, state.sim_slots.acquire())
        .await
        .map_err(|_| timeout())?
        .map_err(ApiError::internal)?;
    let cfg = state.config.sim.clone();
    let paths = req.paths as usize;
    let result = tokio::task::spawn_blocking(move || {
        estimate_resets_until(&layout, &cfg, paths, req.seed, deadline)
    })
    .await
    .map_err(ApiError::internal)?;
    drop(permit);
    match result {
        Ok(est) => Ok(Json(est)),
        Err(SimError::DeadlineExceeded { completed, paths }) => Err(timeout()
            .with_detail(json!({"completed_paths": completed, "paths": paths}))),
        Err(e @ SimError::InfeasibleLayout { .. }) => Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "infeasible_layout",
            e.to_string(),
        )),
        Err(e) => Err(ApiError::internal(e)),
    }
}

async fn catalog(State(state): State<Arc<AppState>>) -> Json<Vec<FurnitureSpec>> {
    Json(state.catalog.specs().to_vec())
}

async fn healthz(State(state): State<Arc<AppState>>) -> Response {
    match &state.model {
        Some(m) => Json(Health {
            status: "ok",
            model_version: &m.version,
        })
        .into_response(),
        None => ApiError::no_model().into_response(),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/predict", post(predict))
        .route("/api/simulate", post(simulate))
        .route("/api/catalog", get(catalog))
        .route("/healthz", get(healthz))
        .layer(CorsLayer::permissive())
        .with_state(Arc::new(state))
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, state: AppState) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
