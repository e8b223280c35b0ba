//! JSON-over-HTTP front end: classification of uploaded images, per-task similarity
//! search, painting records with thumbnails, and a health probe.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use pictor::dataset::{DiskSource, ImageSource, Manifest, PaintingRecord, Task};
use pictor::descriptors::{DescriptorKind, FeatureVector};
use pictor::imaging::{self, ImageBuffer};
use pictor::net::{l2_normalized, LogitsTriple, PaintingNet};
use pictor::nn::checkpoint::Checkpoint;
use pictor::retrieval::{sha256_hex, EmbeddingIndex, IndexError, SimilarityHit};
use pictor::train;

pub mod conformance;

/// Default cap on request bodies.
pub const DEFAULT_MAX_UPLOAD: usize = 8 * 1024 * 1024;
pub const DEFAULT_K: usize = 4;
pub const TOP_LABELS: usize = 5;
pub const THUMBNAIL_SIDE: usize = 256;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("index and checkpoint disagree: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Nn(#[from] pictor::nn::NnError),
    #[error(transparent)]
    Dataset(#[from] pictor::dataset::DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An error answered to the client as `{"error": message}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn internal(message: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelProbability {
    pub label: String,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskPrediction {
    /// Highest-probability labels, at most five, in descending order.
    pub top: Vec<LabelProbability>,
    /// Full distribution in label-index order.
    pub distribution: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    /// SHA-256 of the uploaded bytes; identical uploads share a token.
    pub upload_token: String,
    pub tasks: BTreeMap<String, TaskPrediction>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarRequest {
    pub painting_id: Option<String>,
    /// Base64-encoded image bytes.
    pub image: Option<String>,
    pub task: String,
    pub k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HitView {
    pub painting_id: String,
    pub score: f64,
    pub rank: usize,
    pub artist: String,
    pub style: String,
    pub genre: String,
    pub thumbnail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarResponse {
    pub task: String,
    pub query: serde_json::Value,
    pub hits: Vec<HitView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaintingResponse {
    pub record: PaintingRecord,
    pub thumbnail: String,
    /// PNG thumbnail, base64.
    pub image_png_base64: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub index_size: usize,
    pub checkpoint_sha256: String,
}

/// Everything needed to answer requests; immutable once built.
pub struct Service {
    pub net: PaintingNet,
    pub index: EmbeddingIndex,
    pub manifest: Manifest,
    pub source: Arc<dyn ImageSource>,
    pub inject: Option<DescriptorKind>,
    pub checkpoint_sha256: String,
}

fn thumbnail_url(id: &str) -> String {
    format!("/painting/{id}/thumbnail")
}

fn softmax64(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
    let e: Vec<f64> = logits.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Encodes an image as PNG bytes.
pub fn png_bytes(img: &ImageBuffer) -> Result<Vec<u8>, ApiError> {
    img.to_png().map_err(ApiError::internal)
}

impl Service {
    /// Checks that the index was built from this checkpoint's heads.
    pub fn new(
        net: PaintingNet,
        index: EmbeddingIndex,
        manifest: Manifest,
        source: Arc<dyn ImageSource>,
        inject: Option<DescriptorKind>,
        checkpoint_sha256: String,
    ) -> Result<Self, ServerError> {
        if index.dims != net.cfg.classes() {
            return Err(ServerError::Mismatch(format!(
                "index dims {:?} but checkpoint heads {:?}",
                index.dims,
                net.cfg.classes()
            )));
        }
        if index.checkpoint_sha256 != checkpoint_sha256 {
            return Err(ServerError::Mismatch("index was built from a different checkpoint".into()));
        }
        Ok(Self { net, index, manifest, source, inject, checkpoint_sha256 })
    }

    /// Loads checkpoint, index and manifest from disk. Images are read relative to
    /// `image_root`, or the manifest's root when absent.
    pub fn load(checkpoint: &Path, index: &Path, manifest: &Path, image_root: Option<PathBuf>) -> Result<Self, ServerError> {
        let bytes = std::fs::read(checkpoint)?;
        let ck = Checkpoint::from_reader(bytes.as_slice())?;
        let inject = serde_json::from_value(ck.meta["extra"]["inject"].clone()).unwrap_or(None);
        let net = PaintingNet::from_checkpoint(&ck)?;
        let manifest = Manifest::load(manifest)?;
        let root = image_root.unwrap_or_else(|| manifest.root.clone());
        Self::new(net, EmbeddingIndex::load(index)?, manifest, Arc::new(DiskSource { root }), inject, sha256_hex(&bytes))
    }

    fn features(&self, img: &ImageBuffer) -> Result<Option<Vec<FeatureVector>>, ApiError> {
        match self.inject {
            Some(kind) => Ok(Some(vec![kind.extract(img).map_err(|e| ApiError::bad_request(e.to_string()))?])),
            None => Ok(None),
        }
    }

    fn logits_for_image(&self, token: &str, img: &ImageBuffer) -> Result<LogitsTriple, ApiError> {
        let set = train::eval_crops(&self.net, token, img).map_err(|e| ApiError::bad_request(e.to_string()))?;
        let feats = self.features(img)?;
        let mut out = self.net.infer(&[set], feats.as_deref()).map_err(ApiError::internal)?;
        Ok(out.remove(0))
    }

    fn decode(bytes: &[u8]) -> Result<ImageBuffer, ApiError> {
        if bytes.is_empty() {
            return Err(ApiError::bad_request("empty image upload"));
        }
        ImageBuffer::decode(bytes).map_err(|e| ApiError::bad_request(format!("cannot decode image: {e}")))
    }

    pub fn classify(&self, bytes: &[u8]) -> Result<ClassifyResponse, ApiError> {
        let img = Self::decode(bytes)?;
        let token = sha256_hex(bytes);
        let logits = self.logits_for_image(&token, &img)?;
        let mut tasks = BTreeMap::new();
        for t in Task::ALL {
            let dist = softmax64(logits.get(t));
            let mut order: Vec<usize> = (0..dist.len()).collect();
            order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
            let top = order
                .iter()
                .take(TOP_LABELS)
                .map(|&i| LabelProbability {
                    label: self.manifest.labels[t.index()].label(i).unwrap_or("?").to_string(),
                    probability: dist[i],
                })
                .collect();
            tasks.insert(t.name().to_string(), TaskPrediction { top, distribution: dist });
        }
        Ok(ClassifyResponse { upload_token: token, tasks })
    }

    /// Nearest neighbours of an indexed painting (itself excluded) or of an uploaded image.
    pub fn similar(&self, req: &SimilarRequest) -> Result<SimilarResponse, ApiError> {
        let task: Task = req.task.parse().map_err(|_| ApiError::bad_request(format!("unknown task `{}`", req.task)))?;
        let k = req.k.unwrap_or(DEFAULT_K);
        if k == 0 {
            return Err(ApiError::bad_request("k must be at least 1"));
        }
        let (hits, query) = match (&req.painting_id, &req.image) {
            (Some(id), None) => {
                let pos = self.index.position(id).ok_or_else(|| ApiError::not_found(format!("painting `{id}` is not indexed")))?;
                let v = self.index.row(task, pos).to_vec();
                (self.index.query_topk_excluding(task, &v, k, Some(id)), serde_json::json!({ "painting_id": id }))
            }
            (None, Some(b64)) => {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(b64)
                    .map_err(|e| ApiError::bad_request(format!("image is not valid base64: {e}")))?;
                let img = Self::decode(&bytes)?;
                let token = sha256_hex(&bytes);
                let logits = self.logits_for_image(&token, &img)?;
                let v = l2_normalized(logits.get(task));
                (self.index.query_topk(task, &v, k), serde_json::json!({ "upload_token": token }))
            }
            _ => return Err(ApiError::bad_request("give exactly one of `painting_id` and `image`")),
        };
        let hits = hits.map_err(|e| ApiError::bad_request(e.to_string()))?;
        Ok(SimilarResponse { task: task.name().to_string(), query, hits: hits.iter().map(|h| self.hit_view(h)).collect() })
    }

    fn hit_view(&self, h: &SimilarityHit) -> HitView {
        let r = self.manifest.record(&h.painting_id);
        let label = |t: Task| r.map_or(String::new(), |r| r.label(t).to_string());
        HitView {
            painting_id: h.painting_id.clone(),
            score: h.score,
            rank: h.rank,
            artist: label(Task::Artist),
            style: label(Task::Style),
            genre: label(Task::Genre),
            thumbnail: thumbnail_url(&h.painting_id),
        }
    }

    fn record(&self, id: &str) -> Result<&PaintingRecord, ApiError> {
        self.manifest.record(id).ok_or_else(|| ApiError::not_found(format!("unknown painting `{id}`")))
    }

    /// PNG whose longer side is at most [`THUMBNAIL_SIDE`].
    pub fn thumbnail(&self, id: &str) -> Result<Vec<u8>, ApiError> {
        let img = self.source.load(self.record(id)?).map_err(|e| ApiError::internal(format!("cannot read image: {e}")))?;
        let long = img.width().max(img.height());
        let img = if long > THUMBNAIL_SIDE {
            let s = THUMBNAIL_SIDE as f64 / long as f64;
            let w = ((img.width() as f64 * s).round() as usize).max(1);
            let h = ((img.height() as f64 * s).round() as usize).max(1);
            imaging::resize(&img, w, h).map_err(ApiError::internal)?
        } else {
            img
        };
        png_bytes(&img)
    }

    pub fn painting(&self, id: &str) -> Result<PaintingResponse, ApiError> {
        let record = self.record(id)?.clone();
        let png = self.thumbnail(id)?;
        Ok(PaintingResponse {
            thumbnail: thumbnail_url(id),
            image_png_base64: base64::engine::general_purpose::STANDARD.encode(png),
            record,
        })
    }

    pub fn health(&self) -> HealthResponse {
        HealthResponse {
            status: "ok".into(),
            index_size: self.index.len(),
            checkpoint_sha256: self.checkpoint_sha256.clone(),
        }
    }
}

/// The live service, swapped atomically on reload. While a reload is in progress every
/// endpoint answers 503.
#[derive(Default)]
pub struct AppState {
    current: RwLock<Option<Arc<Service>>>,
}

impl AppState {
    pub fn new(service: Service) -> Self {
        Self { current: RwLock::new(Some(Arc::new(service))) }
    }

    pub fn service(&self) -> Result<Arc<Service>, ApiError> {
        self.current
            .read()
            .expect("state lock")
            .clone()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "index reload in progress"))
    }

    /// Takes the current service out of rotation.
    pub fn begin_reload(&self) {
        *self.current.write().expect("state lock") = None;
    }

    pub fn finish_reload(&self, service: Service) {
        *self.current.write().expect("state lock") = Some(Arc::new(service));
    }

    /// Runs `load` with the service out of rotation; on failure the previous one is restored.
    pub fn reload_with(&self, load: impl FnOnce() -> Result<Service, ServerError>) -> Result<(), ServerError> {
        let previous = self.current.write().expect("state lock").take();
        match load() {
            Ok(s) => {
                self.finish_reload(s);
                Ok(())
            }
            Err(e) => {
                *self.current.write().expect("state lock") = previous;
                Err(e)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub max_upload_bytes: usize,
    /// Built UI assets served for every path the API does not claim.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { max_upload_bytes: DEFAULT_MAX_UPLOAD, static_dir: None }
    }
}

type Shared = Arc<AppState>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

async fn health(State(state): State<Shared>) -> Result<Json<HealthResponse>, ApiError> {
    Ok(Json(state.service()?.health()))
}

async fn classify(State(state): State<Shared>, mut multipart: Multipart) -> Result<Json<ClassifyResponse>, ApiError> {
    let service = state.service()?;
    let mut image = None;
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::new(e.status(), e.body_text()))?
    {
        if field.name() == Some("image") {
            image = Some(field.bytes().await.map_err(|e| ApiError::new(e.status(), e.body_text()))?);
        }
    }
    let bytes = image.ok_or_else(|| ApiError::bad_request("multipart field `image` is required"))?;
    blocking(move || service.classify(&bytes)).await.map(Json)
}

async fn similar(State(state): State<Shared>, body: Bytes) -> Result<Json<SimilarResponse>, ApiError> {
    let service = state.service()?;
    let req: SimilarRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))?;
    blocking(move || service.similar(&req)).await.map(Json)
}

async fn painting(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<PaintingResponse>, ApiError> {
    let service = state.service()?;
    blocking(move || service.painting(&id)).await.map(Json)
}

async fn thumbnail(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let service = state.service()?;
    let png = blocking(move || service.thumbnail(&id)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

pub fn router(state: Shared, cfg: &ServerConfig) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/classify", post(classify))
        .route("/similar", post(similar))
        .route("/painting/{id}", get(painting))
        .route("/painting/{id}/thumbnail", get(thumbnail))
        .layer(DefaultBodyLimit::max(cfg.max_upload_bytes))
        .with_state(state);
    match &cfg.static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(addr: SocketAddr, state: Shared, cfg: ServerConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state, &cfg)).await
}
