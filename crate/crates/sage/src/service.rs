//! HTTP/JSON studio backend: sessions over registered checkpoints with
//! viewpoint steering and semantic edit layers.
//!
//! Every subdirectory of the checkpoint directory that resolves to a
//! checkpoint is registered under its directory name.

use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use lru::LruCache;
use sage_core::applications::{apply_edits, EditOp};
use sage_core::geometry::CameraPose;
use sage_core::labels::{argmax_channels, NUM_CLASSES};
use sage_core::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::checkpoint::{self, Loaded};
use crate::imageio;

pub const OPENAPI: &str = include_str!("../assets/openapi.json");
pub const DEFAULT_MAX_SESSIONS: usize = 64;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub ckpt_dir: PathBuf,
    pub max_sessions: usize,
    /// `None` allows any origin.
    pub cors_origin: Option<String>,
}

impl ServiceConfig {
    pub fn new(ckpt_dir: impl Into<PathBuf>) -> Self {
        Self {
            ckpt_dir: ckpt_dir.into(),
            max_sessions: DEFAULT_MAX_SESSIONS,
            cors_origin: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub ckpt_id: String,
    pub style_name: String,
    /// Side of the rendered drawings in pixels.
    pub resolution: usize,
}

/// Registered checkpoints in directory-name order.
pub fn catalog(ckpt_dir: &Path) -> Vec<(CatalogEntry, PathBuf)> {
    let Ok(rd) = std::fs::read_dir(ckpt_dir) else {
        return Vec::new();
    };
    let mut dirs: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    dirs.sort();
    dirs.into_iter()
        .filter_map(|d| {
            let id = d.file_name()?.to_str()?.to_owned();
            let step = checkpoint::resolve(&d).ok()?;
            let meta = checkpoint::load_meta(&step).ok()?;
            let render = meta.config.entry_at(meta.step.saturating_sub(1)).1.render_resolution;
            Some((
                CatalogEntry {
                    style_name: meta.style_name.clone().unwrap_or_else(|| id.clone()),
                    ckpt_id: id,
                    resolution: sage_core::model::Model::image_resolution(render),
                },
                step,
            ))
        })
        .collect()
}

struct Session {
    ckpt_id: String,
    z: Tensor,
    pose: CameraPose,
    edits: Vec<EditOp>,
}

struct AppState {
    cfg: ServiceConfig,
    models: Mutex<HashMap<String, Arc<Loaded>>>,
    sessions: Mutex<LruCache<String, Arc<tokio::sync::Mutex<Session>>>>,
}

pub fn router(cfg: ServiceConfig) -> Router {
    let cap = NonZeroUsize::new(cfg.max_sessions.max(1)).expect("positive");
    let origin = match &cfg.cors_origin {
        Some(o) => AllowOrigin::exact(HeaderValue::from_str(o).unwrap_or(HeaderValue::from_static("null"))),
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST, Method::DELETE])
        .allow_headers([axum::http::header::CONTENT_TYPE]);
    let state = Arc::new(AppState {
        cfg,
        models: Mutex::new(HashMap::new()),
        sessions: Mutex::new(LruCache::new(cap)),
    });
    Router::new()
        .route("/api/session", post(create_session))
        .route("/api/session/{id}/render", get(render_view))
        .route("/api/session/{id}/edit", post(add_edits).delete(clear_edits))
        .route("/api/checkpoints", get(list_checkpoints))
        .route("/api/spec", get(spec))
        .layer(cors)
        .with_state(state)
}

pub async fn serve(cfg: ServiceConfig, host: &str, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    axum::serve(listener, router(cfg)).await
}

// ----- errors ----------------------------------------------------------------------

struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": msg.into() }),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<sage_core::Error> for ApiError {
    fn from(e: sage_core::Error) -> Self {
        let status = match e {
            sage_core::Error::Argument(_) | sage_core::Error::OutOfBounds(_) | sage_core::Error::Architecture(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError::new(StatusCode::BAD_REQUEST, msg)
}

fn parse_json(body: &Bytes) -> ApiResult<Value> {
    serde_json::from_slice(body).map_err(|e| bad_request(format!("malformed JSON: {e}")))
}

// ----- model and session access ------------------------------------------------------

impl AppState {
    fn model(&self, ckpt_id: &str) -> ApiResult<Arc<Loaded>> {
        if let Some(m) = self.models.lock().unwrap().get(ckpt_id) {
            return Ok(m.clone());
        }
        let step = catalog(&self.cfg.ckpt_dir)
            .into_iter()
            .find(|(e, _)| e.ckpt_id == ckpt_id)
            .map(|(_, p)| p)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown checkpoint `{ckpt_id}`")))?;
        let loaded = Arc::new(
            Loaded::open(&step).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?,
        );
        self.models.lock().unwrap().insert(ckpt_id.to_owned(), loaded.clone());
        Ok(loaded)
    }

    fn session(&self, id: &str) -> ApiResult<Arc<tokio::sync::Mutex<Session>>> {
        self.sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session `{id}`")))
    }
}

struct Rendered {
    drawing: Vec<u8>,
    mask: Vec<u8>,
    photo: Vec<u8>,
}

/// Generates at `pose` and applies the edit layer to the semantic map.
fn render(loaded: &Loaded, z: &Tensor, pose: &CameraPose, edits: &[EditOp]) -> sage_core::Result<Rendered> {
    let g = loaded.model.generate(&loaded.params, z, &[*pose], loaded.render_resolution())?;
    let (semantics, changed) = apply_edits(&g.semantics, edits)?;
    let drawing = if changed.iter().any(|&c| c) {
        if loaded.model.generator.translator.is_none() {
            return Err(sage_core::Error::Architecture("this checkpoint has no translator to apply edits".into()));
        }
        loaded.model.translate(&loaded.params, &g.image, &semantics)?
    } else {
        g.drawing
    };
    let (h, w) = (semantics.shape()[2], semantics.shape()[3]);
    let png = |r: crate::error::Result<Vec<u8>>| r.map_err(|e| sage_core::Error::Argument(e.to_string()));
    Ok(Rendered {
        drawing: png(imageio::encode_rgb(&drawing.select(0)))?,
        mask: png(imageio::encode_labels(&argmax_channels(&semantics.select(0)), h, w))?,
        photo: png(imageio::encode_rgb(&g.image.select(0)))?,
    })
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn render_session(state: &AppState, s: &Session) -> ApiResult<Rendered> {
    let loaded = state.model(&s.ckpt_id)?;
    let (z, pose, edits) = (s.z.clone(), s.pose, s.edits.clone());
    blocking(move || Ok(render(&loaded, &z, &pose, &edits)?)).await
}

// ----- handlers ----------------------------------------------------------------------

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<Value>> {
    let v = parse_json(&body)?;
    let ckpt_id = v
        .get("ckpt_id")
        .and_then(Value::as_str)
        .ok_or_else(|| bad_request("`ckpt_id` (string) is required"))?
        .to_owned();
    let seed = v
        .get("seed")
        .and_then(Value::as_u64)
        .ok_or_else(|| bad_request("`seed` (non-negative integer) is required"))?;
    let loaded = state.model(&ckpt_id)?;
    let session = Session {
        ckpt_id,
        z: loaded.model.latent_for_seed(seed),
        pose: loaded.meta.config.model.projector.poses.center(),
        edits: Vec::new(),
    };
    let r = render_session(&state, &session).await?;
    let id = uuid::Uuid::new_v4().to_string();
    state
        .sessions
        .lock()
        .unwrap()
        .put(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    Ok(Json(json!({
        "session_id": id,
        "preview_png_b64": B64.encode(&r.drawing),
        "mask_png_b64": B64.encode(&r.mask),
    })))
}

#[derive(Deserialize)]
struct PoseQuery {
    yaw: Option<String>,
    pitch: Option<String>,
}

fn angle(v: Option<&str>, name: &str) -> ApiResult<f64> {
    let s = v.ok_or_else(|| bad_request(format!("query parameter `{name}` is required")))?;
    s.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| bad_request(format!("`{name}` must be a finite number")))
}

async fn render_view(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<PoseQuery>,
) -> ApiResult<Json<Value>> {
    let yaw = angle(q.yaw.as_deref(), "yaw")?;
    let pitch = angle(q.pitch.as_deref(), "pitch")?;
    let session = state.session(&id)?;
    let mut s = session.lock().await;
    let dist = state.model(&s.ckpt_id)?.meta.config.model.projector.poses;
    if !dist.in_bounds(yaw, pitch) {
        return Err(ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: json!({
                "error": "pose out of bounds",
                "yaw_bounds": [dist.yaw_bounds.0, dist.yaw_bounds.1],
                "pitch_bounds": [dist.pitch_bounds.0, dist.pitch_bounds.1],
            }),
        });
    }
    s.pose = dist.center().with_angles(yaw, pitch);
    let r = render_session(&state, &s).await?;
    Ok(Json(json!({
        "drawing_png_b64": B64.encode(&r.drawing),
        "mask_png_b64": B64.encode(&r.mask),
        "photo_png_b64": B64.encode(&r.photo),
    })))
}

/// Class range is checked before the region so that an invalid class is
/// reported as 422 even when the op would not deserialize.
fn parse_edit_ops(v: &Value, h: usize, w: usize) -> ApiResult<Vec<EditOp>> {
    let list = v
        .get("edits")
        .and_then(Value::as_array)
        .ok_or_else(|| bad_request("`edits` (array) is required"))?;
    let mut ops = Vec::with_capacity(list.len());
    for (i, item) in list.iter().enumerate() {
        let class = item
            .get("class")
            .and_then(Value::as_i64)
            .ok_or_else(|| bad_request(format!("edits[{i}]: `class` (integer) is required")))?;
        if !(0..NUM_CLASSES as i64).contains(&class) {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                format!("edits[{i}]: class {class} outside 0..={}", NUM_CLASSES - 1),
            ));
        }
        let op: EditOp = serde_json::from_value(item.clone()).map_err(|e| bad_request(format!("edits[{i}]: {e}")))?;
        op.validate(h, w).map_err(|e| bad_request(format!("edits[{i}]: {e}")))?;
        ops.push(op);
    }
    Ok(ops)
}

async fn add_edits(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let v = parse_json(&body)?;
    let session = state.session(&id)?;
    let mut s = session.lock().await;
    let res = state.model(&s.ckpt_id)?.image_resolution();
    let ops = parse_edit_ops(&v, res, res)?;
    let before = s.edits.len();
    s.edits.extend(ops);
    match render_session(&state, &s).await {
        Ok(r) => Ok(Json(json!({
            "drawing_png_b64": B64.encode(&r.drawing),
            "mask_png_b64": B64.encode(&r.mask),
        }))),
        Err(e) => {
            s.edits.truncate(before);
            Err(e)
        }
    }
}

async fn clear_edits(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let session = state.session(&id)?;
    let mut s = session.lock().await;
    s.edits.clear();
    let r = render_session(&state, &s).await?;
    Ok(Json(json!({
        "drawing_png_b64": B64.encode(&r.drawing),
        "mask_png_b64": B64.encode(&r.mask),
    })))
}

async fn list_checkpoints(State(state): State<Arc<AppState>>) -> Json<Vec<CatalogEntry>> {
    let dir = state.cfg.ckpt_dir.clone();
    let entries = tokio::task::spawn_blocking(move || catalog(&dir)).await.unwrap_or_default();
    Json(entries.into_iter().map(|(e, _)| e).collect())
}

async fn spec() -> Response {
    ([(axum::http::header::CONTENT_TYPE, "application/json")], OPENAPI).into_response()
}
