//! HTTP front end over a frozen [`EditModels`].

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::error::{Error, Result};
use crate::pipeline::{edit, EditModels, StyleChoice};
use crate::raster::{BinaryGrid, Grid, RgbImage};
use crate::scene::{BBox, EditMask, ObjectMode};

/// Default number of edits allowed to run at once.
pub const DEFAULT_WORKERS: usize = 2;
/// Page size of `/api/styles` when `limit` is absent, and its upper bound.
pub const DEFAULT_PAGE: usize = 20;
pub const MAX_PAGE: usize = 200;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StylePick {
    pub instance_index: usize,
    pub style_index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditRequest {
    /// Base64 PNG.
    pub image: String,
    /// Base64 8-bit PNG class map.
    pub seg: String,
    /// Base64 PNG; any nonzero pixel is edited.
    pub mask: String,
    #[serde(default)]
    pub styles: Vec<StylePick>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub instance_index: usize,
    pub class_name: String,
    pub mode: ObjectMode,
    pub bbox: BBox,
    pub used_style_index: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditResponse {
    /// Base64 PNG.
    pub image: String,
    pub instances: Vec<InstanceSummary>,
    pub timing_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleEntry {
    pub style_index: usize,
    /// Base64 PNG of the crop the code was encoded from; empty when the bank
    /// was built without thumbnails.
    pub thumbnail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint_hash: Option<String>,
    pub classes: Vec<String>,
}

#[derive(Debug, Deserialize)]
pub struct StylesQuery {
    pub class: String,
    #[serde(default)]
    pub offset: usize,
    pub limit: Option<usize>,
}

/// Shared state. Models are installed once and read-only afterwards; until
/// then every endpoint answers 503.
#[derive(Clone)]
pub struct ServiceState {
    models: Arc<OnceLock<Arc<EditModels>>>,
    workers: Arc<Semaphore>,
}

impl ServiceState {
    pub fn unloaded(workers: usize) -> Self {
        Self {
            models: Arc::new(OnceLock::new()),
            workers: Arc::new(Semaphore::new(workers.max(1))),
        }
    }

    pub fn ready(models: EditModels, workers: usize) -> Self {
        let state = Self::unloaded(workers);
        state.install(models);
        state
    }

    /// First call wins; later calls are ignored.
    pub fn install(&self, models: EditModels) {
        let _ = self.models.set(Arc::new(models));
    }

    fn models(&self) -> Result<Arc<EditModels>, ApiError> {
        self.models.get().cloned().ok_or_else(ApiError::not_loaded)
    }
}

/// Error body `{"error": "..."}` with a status code.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
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

    fn not_loaded() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "checkpoints not loaded")
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Dimension(_) | Error::Validation(_) | Error::NoStyles(_) | Error::Image(_) => StatusCode::BAD_REQUEST,
            Error::MissingCheckpoint { .. } => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

pub fn router(state: ServiceState) -> Router {
    Router::new()
        .route("/api/edit", post(post_edit))
        .route("/api/styles", get(get_styles))
        .route("/api/health", get(get_health))
        .with_state(state)
}

/// Binds first so health checks see 503 while `load` runs, then serves until
/// the process is stopped. A failed load ends the server with its error.
pub async fn serve<F>(port: u16, workers: usize, load: F) -> Result<()>
where
    F: FnOnce() -> Result<EditModels> + Send + 'static,
{
    let addr = SocketAddr::from(([0, 0, 0, 0], port));
    let io_err = |e| Error::io(format!("0.0.0.0:{port}"), e);
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(io_err)?;
    let state = ServiceState::unloaded(workers);
    let server = axum::serve(listener, router(state.clone()));
    tracing::info!(%addr, "listening");
    let loader = async {
        let models = tokio::task::spawn_blocking(load)
            .await
            .map_err(|e| Error::Config(format!("checkpoint loader failed: {e}")))??;
        state.install(models);
        tracing::info!("checkpoints loaded");
        std::future::pending::<Result<()>>().await
    };
    tokio::select! {
        r = server => r.map_err(io_err),
        r = loader => r,
    }
}

fn decode_b64(field: &str, text: &str) -> Result<Vec<u8>, ApiError> {
    B64.decode(text.trim())
        .map_err(|e| ApiError::bad_request(format!("{field}: invalid base64: {e}")))
}

fn decode_field<T>(field: &str, text: &str, decode: impl FnOnce(&[u8]) -> Result<T>) -> Result<T, ApiError> {
    let bytes = decode_b64(field, text)?;
    decode(&bytes).map_err(|e| ApiError::bad_request(format!("{field}: {e}")))
}

/// Decoded and validated request, ready for the pipeline.
struct EditJob {
    image: RgbImage,
    labels: Grid<u8>,
    mask: EditMask,
    styles: BTreeMap<usize, StyleChoice>,
    seed: u64,
}

fn decode_request(req: &EditRequest, models: &EditModels) -> Result<EditJob, ApiError> {
    let image = decode_field("image", &req.image, RgbImage::decode_png)?;
    let labels = decode_field("seg", &req.seg, Grid::<u8>::decode_png_u8)?;
    let mask = decode_field("mask", &req.mask, BinaryGrid::decode_png_mask)?;
    if image.dims() != labels.dims() || image.dims() != mask.dims() {
        return Err(ApiError::bad_request(format!(
            "image {:?}, seg {:?} and mask {:?} differ in size",
            image.dims(),
            labels.dims(),
            mask.dims()
        )));
    }
    let k = models.classes.num_classes();
    if let Some(&l) = labels.data.iter().find(|&&l| l as usize >= k) {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("seg label {l} is not one of the {k} known classes"),
        ));
    }
    let mut styles = BTreeMap::new();
    for pick in &req.styles {
        if styles.insert(pick.instance_index, StyleChoice::Index(pick.style_index)).is_some() {
            return Err(ApiError::bad_request(format!(
                "instance {} has more than one style",
                pick.instance_index
            )));
        }
    }
    Ok(EditJob {
        image,
        labels,
        mask: EditMask::new(mask).map_err(ApiError::from)?,
        styles,
        seed: req.seed,
    })
}

fn run_edit(models: &EditModels, job: EditJob) -> Result<EditResponse, ApiError> {
    let start = Instant::now();
    let seg = models.classes.segmentation(job.labels)?;
    let out = edit(models, &job.image, &seg, None, &job.mask, &job.styles, job.seed)?;
    for index in job.styles.keys() {
        if !out.instances.iter().any(|r| r.instance_index == *index) {
            return Err(ApiError::bad_request(format!("no edited instance with index {index}")));
        }
    }
    let instances = out
        .instances
        .into_iter()
        .map(|r| InstanceSummary {
            instance_index: r.instance_index,
            class_name: r.class_name,
            mode: r.mode,
            bbox: r.bbox,
            used_style_index: r.used_style_index,
        })
        .collect();
    Ok(EditResponse {
        image: B64.encode(out.image.encode_png()?),
        instances,
        timing_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

async fn post_edit(
    State(state): State<ServiceState>,
    payload: Result<Json<EditRequest>, JsonRejection>,
) -> Result<Json<EditResponse>, ApiError> {
    let models = state.models()?;
    let Json(req) = payload?;
    let _permit = state
        .workers
        .acquire()
        .await
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "worker pool closed"))?;
    let response = tokio::task::spawn_blocking(move || {
        let job = decode_request(&req, &models)?;
        run_edit(&models, job)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("edit worker failed: {e}")))??;
    Ok(Json(response))
}

async fn get_styles(
    State(state): State<ServiceState>,
    Query(query): Query<StylesQuery>,
) -> Result<Json<Vec<StyleEntry>>, ApiError> {
    let models = state.models()?;
    let class_id = models
        .classes
        .id_of(&query.class)
        .map_err(|_| ApiError::new(StatusCode::NOT_FOUND, format!("unknown class {}", query.class)))?;
    let limit = query.limit.unwrap_or(DEFAULT_PAGE).min(MAX_PAGE);
    let total = models.bank.class_entries(class_id).len();
    let entries = (query.offset.min(total)..total)
        .take(limit)
        .map(|i| StyleEntry {
            style_index: i,
            thumbnail: models.bank.thumbnail(class_id, i).map(|t| B64.encode(t)).unwrap_or_default(),
        })
        .collect();
    Ok(Json(entries))
}

async fn get_health(State(state): State<ServiceState>) -> Response {
    match state.models.get() {
        Some(models) => Json(Health {
            status: "ok".into(),
            checkpoint_hash: Some(models.checkpoint_hash.clone()),
            classes: models.classes.classes.clone(),
        })
        .into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(Health {
                status: "loading".into(),
                checkpoint_hash: None,
                classes: Vec::new(),
            }),
        )
            .into_response(),
    }
}
