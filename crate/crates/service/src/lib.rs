//! HTTP API over one shared, read-only model snapshot: upload a content
//! image and style images per session, then request blends by weight.
//! Style codes are computed once per upload and reused across blends.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use stvae_core::imageio::{decode_image, encode_png, from_tensor, resize_bilinear, to_tensor, Image};
use stvae_core::model::{EncodedStyle, LatentMode, StyleModel};
use stvae_core::trainer::{load_checkpoint, Checkpoint, Metadata};
use stvae_core::variation::BlendWeights;
use stvae_core::Error;

pub const MAX_UPLOAD_BYTES: usize = 4 * 1024 * 1024;
/// Request bodies above this are refused before the handler runs.
pub const BODY_LIMIT_BYTES: usize = 16 * 1024 * 1024;
pub const MAX_SHORT_SIDE: usize = 256;
pub const MAX_STYLES: usize = 8;
pub const SESSION_HEADER: &str = "x-session-id";
const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

pub struct LoadedModel {
    pub model: StyleModel,
    pub metadata: Metadata,
    pub generation: u64,
}

struct StoredStyle {
    image: Image,
    /// Code and the model generation it was computed under.
    cached: Option<(u64, EncodedStyle)>,
}

#[derive(Default)]
struct Session {
    contents: HashMap<String, Image>,
    styles: HashMap<String, StoredStyle>,
}

#[derive(Default)]
pub struct AppState {
    model: RwLock<Option<Arc<LoadedModel>>>,
    generation: AtomicU64,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
    encode_style_calls: AtomicU64,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_checkpoint(ckpt: &Checkpoint) -> stvae_core::Result<Self> {
        let s = Self::new();
        s.install(ckpt)?;
        Ok(s)
    }

    /// Replace the model snapshot. Requests already running keep the old one.
    pub fn install(&self, ckpt: &Checkpoint) -> stvae_core::Result<Arc<LoadedModel>> {
        let model = ckpt.model()?;
        let loaded = Arc::new(LoadedModel {
            model,
            metadata: ckpt.metadata.clone(),
            generation: self.generation.fetch_add(1, Ordering::SeqCst) + 1,
        });
        *self.model.write().expect("model lock") = Some(loaded.clone());
        Ok(loaded)
    }

    pub fn current(&self) -> Option<Arc<LoadedModel>> {
        self.model.read().expect("model lock").clone()
    }

    /// Number of style encodings performed so far.
    pub fn encode_style_calls(&self) -> u64 {
        self.encode_style_calls.load(Ordering::SeqCst)
    }

    fn session(&self, headers: &HeaderMap) -> Arc<Mutex<Session>> {
        let id = headers
            .get(SESSION_HEADER)
            .and_then(|v| v.to_str().ok())
            .unwrap_or("default")
            .to_string();
        self.sessions
            .lock()
            .expect("session table")
            .entry(id)
            .or_default()
            .clone()
    }

    fn encode(&self, model: &StyleModel, img: &Image) -> stvae_core::Result<EncodedStyle> {
        self.encode_style_calls.fetch_add(1, Ordering::SeqCst);
        model.encode_style_image(img)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn no_model() -> Self {
        Self::new(StatusCode::CONFLICT, "no_model", "no model is loaded")
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidArgument(_) | Error::Decode { .. } => StatusCode::BAD_REQUEST,
            Error::UnsupportedFormat(_) => StatusCode::UNSUPPORTED_MEDIA_TYPE,
            Error::Dimension(_)
            | Error::Checkpoint { .. }
            | Error::Manifest(_)
            | Error::ArchitectureMismatch { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.code(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.message, "code": self.code });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> stvae_core::Result<T> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
}

async fn health() -> Json<Health> {
    Json(Health { status: "ok" })
}

#[derive(Serialize, Deserialize)]
pub struct ModelInfo {
    pub architecture_hash: String,
    pub latent_dim: usize,
    pub reduced_channels: usize,
    pub generation: u64,
    pub metadata: serde_json::Value,
}

fn model_info(m: &LoadedModel) -> ModelInfo {
    let md = &m.metadata;
    ModelInfo {
        architecture_hash: md.architecture_hash.clone(),
        latent_dim: m.model.config.latent_dim,
        reduced_channels: m.model.config.reduced_channels,
        generation: m.generation,
        metadata: serde_json::json!({
            "phase": md.phase,
            "step": md.step,
            "seed": md.seed,
            "final_loss": md.loss_history.last(),
            "architecture": md.architecture,
            "training": md.training,
        }),
    }
}

async fn get_model(State(st): State<Arc<AppState>>) -> ApiResult<ModelInfo> {
    let m = st.current().ok_or_else(ApiError::no_model)?;
    Ok(Json(model_info(&m)))
}

#[derive(Deserialize)]
struct LoadRequest {
    path: PathBuf,
}

async fn load_model(State(st): State<Arc<AppState>>, Json(req): Json<LoadRequest>) -> ApiResult<ModelInfo> {
    let ckpt = blocking(move || load_checkpoint(&req.path)).await?;
    let st2 = st.clone();
    let m = blocking(move || st2.install(&ckpt)).await?;
    Ok(Json(model_info(&m)))
}

#[derive(Serialize, Deserialize)]
pub struct UploadResponse {
    pub id: String,
    pub role: String,
    pub width: usize,
    pub height: usize,
}

/// Decode, shrink so the short side is at most 256, and require sides
/// divisible by the model's downsampling factor.
fn prepare_upload(bytes: &[u8], multiple: usize) -> Result<Image, ApiError> {
    if bytes.len() > MAX_UPLOAD_BYTES {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "too_large",
            format!("image is {} bytes; limit is {MAX_UPLOAD_BYTES}", bytes.len()),
        ));
    }
    if !bytes.starts_with(PNG_SIGNATURE) {
        return Err(ApiError::new(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            "unsupported_format",
            "only PNG uploads are accepted",
        ));
    }
    let mut img = decode_image(bytes)?;
    let (w, h) = (img.width(), img.height());
    if w.min(h) > MAX_SHORT_SIDE {
        let scale = MAX_SHORT_SIDE as f64 / w.min(h) as f64;
        let fit = |n: usize| ((n as f64 * scale).round() as usize / multiple * multiple).max(MAX_SHORT_SIDE);
        img = resize_bilinear(&img, fit(w), fit(h))?;
    }
    if img.width() % multiple != 0 || img.height() % multiple != 0 {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "dimension",
            format!(
                "{}×{} is not divisible by {multiple} after resizing",
                img.width(),
                img.height()
            ),
        ));
    }
    Ok(img)
}

async fn upload(State(st): State<Arc<AppState>>, headers: HeaderMap, mut mp: Multipart) -> ApiResult<UploadResponse> {
    let mut role = None;
    let mut data = None;
    let multipart_err = |e: axum::extract::multipart::MultipartError| {
        let status = e.status();
        let code = if status == StatusCode::PAYLOAD_TOO_LARGE { "too_large" } else { "bad_multipart" };
        ApiError::new(status, code, e.body_text())
    };
    while let Some(field) = mp.next_field().await.map_err(multipart_err)? {
        match field.name() {
            Some("role") => role = Some(field.text().await.map_err(multipart_err)?),
            Some("image") => data = Some(field.bytes().await.map_err(multipart_err)?),
            _ => {}
        }
    }
    let role = match role.as_deref() {
        Some(r @ ("content" | "style")) => r.to_string(),
        other => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "invalid_argument",
                format!("role must be `content` or `style`, got {other:?}"),
            ))
        }
    };
    let data = data.ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "invalid_argument", "missing `image` field"))?;

    let model = st.current();
    let multiple = model
        .as_ref()
        .map_or(4, |m| m.model.iae.architecture().downsample());
    let img = tokio::task::spawn_blocking(move || prepare_upload(&data, multiple))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;

    let cached = match (&model, role.as_str()) {
        (Some(m), "style") => {
            let (st2, m2, img2) = (st.clone(), m.clone(), img.clone());
            let enc = blocking(move || st2.encode(&m2.model, &img2)).await?;
            Some((m.generation, enc))
        }
        _ => None,
    };
    let id = format!("{role}-{}", st.next_id.fetch_add(1, Ordering::SeqCst) + 1);
    let (width, height) = (img.width(), img.height());
    let session = st.session(&headers);
    let mut s = session.lock().expect("session lock");
    if role == "content" {
        s.contents.insert(id.clone(), img);
    } else {
        s.styles.insert(id.clone(), StoredStyle { image: img, cached });
    }
    Ok(Json(UploadResponse {
        id,
        role,
        width,
        height,
    }))
}

#[derive(Serialize, Deserialize, Clone)]
pub struct StyleWeight {
    pub id: String,
    pub weight: f64,
}

fn yes() -> bool {
    true
}

#[derive(Serialize, Deserialize, Clone)]
pub struct BlendRequest {
    pub content_id: String,
    pub styles: Vec<StyleWeight>,
    #[serde(default = "yes")]
    pub deterministic: bool,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
pub struct BlendResponse {
    /// Base64-encoded PNG.
    pub image: String,
    pub latency_ms: f64,
}

async fn blend(State(st): State<Arc<AppState>>, headers: HeaderMap, Json(req): Json<BlendRequest>) -> ApiResult<BlendResponse> {
    let start = Instant::now();
    if req.styles.is_empty() || req.styles.len() > MAX_STYLES {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "invalid_argument",
            format!("between 1 and {MAX_STYLES} styles are required"),
        ));
    }
    let weights = BlendWeights::strict(req.styles.iter().map(|s| s.weight).collect())?;
    let model = st.current().ok_or_else(ApiError::no_model)?;

    let session = st.session(&headers);
    let (content, styles) = {
        let s = session.lock().expect("session lock");
        let content = s
            .contents
            .get(&req.content_id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_id", format!("no content `{}`", req.content_id)))?;
        let styles = req
            .styles
            .iter()
            .map(|sw| {
                let stored = s
                    .styles
                    .get(&sw.id)
                    .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_id", format!("no style `{}`", sw.id)))?;
                let fresh = stored
                    .cached
                    .as_ref()
                    .filter(|(g, _)| *g == model.generation)
                    .map(|(_, e)| e.clone());
                Ok((sw.id.clone(), stored.image.clone(), fresh))
            })
            .collect::<Result<Vec<_>, ApiError>>()?;
        (content, styles)
    };

    let mode = if req.deterministic {
        LatentMode::Deterministic
    } else {
        LatentMode::SampleThenBlend { seed: req.seed }
    };
    let (st2, m2) = (st.clone(), model.clone());
    let (png, refreshed) = blocking(move || {
        let mut refreshed = Vec::new();
        let mut encoded = Vec::with_capacity(styles.len());
        for (id, img, fresh) in styles {
            let e = match fresh {
                Some(e) => e,
                None => {
                    let e = st2.encode(&m2.model, &img)?;
                    refreshed.push((id, e.clone()));
                    e
                }
            };
            encoded.push(e);
        }
        let feat = m2.model.iae.encode(&to_tensor(&content))?;
        let out = m2.model.blend_encoded(&feat, &encoded, &weights, mode)?;
        Ok((encode_png(&from_tensor(&out)?)?, refreshed))
    })
    .await?;

    if !refreshed.is_empty() {
        let mut s = session.lock().expect("session lock");
        for (id, e) in refreshed {
            if let Some(stored) = s.styles.get_mut(&id) {
                stored.cached = Some((model.generation, e));
            }
        }
    }
    Ok(Json(BlendResponse {
        image: base64::engine::general_purpose::STANDARD.encode(png),
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
    }))
}

#[cfg(debug_assertions)]
async fn counters(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "encode_style_calls": st.encode_style_calls() }))
}

pub fn router(state: Arc<AppState>) -> Router {
    let r = Router::new()
        .route("/api/health", get(health))
        .route("/api/model", get(get_model))
        .route("/api/model/load", post(load_model))
        .route("/api/upload", post(upload))
        .route("/api/blend", post(blend));
    #[cfg(debug_assertions)]
    let r = r.route("/api/debug/counters", get(counters));
    r.layer(DefaultBodyLimit::max(BODY_LIMIT_BYTES)).with_state(state)
}

/// [`router`] plus static files from `dir` under `/`.
pub fn router_with_static(state: Arc<AppState>, dir: Option<&Path>) -> Router {
    let r = router(state);
    match dir {
        Some(d) => r.fallback_service(tower_http::services::ServeDir::new(d)),
        None => r,
    }
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router_with_static(state, static_dir.as_deref()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
