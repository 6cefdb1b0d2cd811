//! HTTP API over the session store.
//!
//! Images travel as PNG: base64 inside JSON bodies, raw bytes for the
//! segmap and step endpoints. Requests for one session are serialised by a
//! per-session lock, so they apply in arrival order.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use chrono::{DateTime, Utc};
use segedit_core::image::{ImageBuffer, SegMap};
use segedit_core::io::{decode_png, decode_segmap_png, encode_png, encode_segmap_png};
use segedit_core::{Error, Stage};
use segedit_editnet::engine::EditEngine;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex as AsyncMutex;

use crate::session::{BackgroundInput, EditSession, SessionState};
use crate::store::SessionStore;

/// Response header carrying the palette of a segmap PNG as JSON.
pub const PALETTE_HEADER: &str = "x-segedit-palette";
pub const MAX_BODY_BYTES: usize = 64 << 20;

type Shared = Arc<AsyncMutex<EditSession>>;

pub struct AppState {
    engine: Arc<EditEngine>,
    store: SessionStore,
    sessions: Mutex<HashMap<String, Shared>>,
}

impl AppState {
    pub fn new(engine: EditEngine, store: SessionStore) -> Arc<Self> {
        Arc::new(Self {
            engine: Arc::new(engine),
            store,
            sessions: Mutex::new(HashMap::new()),
        })
    }

    pub fn store(&self) -> &SessionStore {
        &self.store
    }

    /// The live session, loading it from disk on first use.
    fn lookup(&self, id: &str) -> Result<Shared, ApiError> {
        if let Some(s) = self.sessions.lock().expect("session map lock").get(id) {
            return Ok(s.clone());
        }
        let loaded = self.store.load(id).map_err(|e| match e {
            Error::Parameter(_) => ApiError::not_found(id),
            other => other.into(),
        })?;
        let session = loaded.ok_or_else(|| ApiError::not_found(id))?;
        let mut map = self.sessions.lock().expect("session map lock");
        Ok(map.entry(id.to_string()).or_insert_with(|| Arc::new(AsyncMutex::new(session))).clone())
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub stage: Option<Stage>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub stage: Option<Stage>,
}

impl ApiError {
    fn not_found(id: &str) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            message: format!("no session `{id}`"),
            stage: None,
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
            stage: None,
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e.root() {
            Error::Shape(_) | Error::Parameter(_) | Error::Palette(_) | Error::Ambiguity(_) | Error::Codec(_) | Error::Json(_) => {
                StatusCode::BAD_REQUEST
            }
            Error::EmptyRegion(_) | Error::NoTarget(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Backend { .. } => StatusCode::BAD_GATEWAY,
            Error::Numeric { .. } | Error::Io(_) | Error::AtStage { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            message: e.to_string(),
            stage: e.stage(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.message,
            stage: self.stage,
        };
        (self.status, Json(body)).into_response()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateRequest {
    /// Base64 PNG.
    pub image: String,
    pub instruction: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateResponse {
    pub id: String,
    /// Base64 grayscale PNG of class ids.
    pub seg: String,
    pub palette: BTreeMap<u32, String>,
    pub target: String,
    pub state: SessionState,
    pub error: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ApplyRequest {
    pub instruction: String,
    /// Base64 PNG of a reference background.
    #[serde(default)]
    pub background: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ApplyResponse {
    pub step_index: usize,
    pub output_url: String,
    pub seg_out_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepView {
    pub index: usize,
    pub instruction: String,
    pub action: String,
    pub background_ref: Option<String>,
    pub output_url: String,
    pub seg_out_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub state: SessionState,
    pub instruction: String,
    pub target: String,
    pub error: Option<String>,
    pub palette: BTreeMap<u32, String>,
    pub cursor: usize,
    pub steps: Vec<StepView>,
    /// Output shown at the cursor; the input at cursor 0.
    pub visible_url: String,
    pub segmap_url: String,
    /// Set when an undo or redo had nothing to move to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

fn step_url(id: &str, k: usize, file: &str) -> String {
    format!("/sessions/{id}/steps/{k}/{file}")
}

impl SessionView {
    pub fn of(s: &EditSession, warning: Option<String>) -> Self {
        Self {
            id: s.id.clone(),
            state: s.state,
            instruction: s.instruction.clone(),
            target: s.target_label.clone(),
            error: s.error.clone(),
            palette: s.palette().clone(),
            cursor: s.cursor,
            steps: s
                .steps
                .iter()
                .enumerate()
                .map(|(k, step)| StepView {
                    index: k,
                    instruction: step.instruction.raw.clone(),
                    action: step.instruction.action.name().to_string(),
                    background_ref: step.background_ref.clone(),
                    output_url: step_url(&s.id, k, "output"),
                    seg_out_url: step_url(&s.id, k, "seg_out"),
                })
                .collect(),
            visible_url: match s.cursor {
                0 => format!("/sessions/{}/input", s.id),
                k => step_url(&s.id, k - 1, "output"),
            },
            segmap_url: format!("/sessions/{}/segmap", s.id),
            warning,
            created_at: s.created_at,
            updated_at: s.updated_at,
        }
    }
}

fn decode_b64_png(field: &str, data: &str) -> Result<ImageBuffer, ApiError> {
    let bytes = B64.decode(data.trim()).map_err(|e| ApiError::bad_request(format!("{field}: invalid base64: {e}")))?;
    Ok(decode_png(&bytes)?)
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, HeaderValue::from_static("image/png"))], bytes).into_response()
}

fn segmap_response(seg: &SegMap) -> Result<Response, ApiError> {
    let mut resp = png_response(encode_segmap_png(seg)?);
    let palette = serde_json::to_string(seg.palette()).map_err(Error::from)?;
    resp.headers_mut()
        .insert(PALETTE_HEADER, HeaderValue::from_str(&palette).map_err(|e| ApiError::bad_request(e.to_string()))?);
    Ok(resp)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        message: format!("worker failed: {e}"),
        stage: None,
    })?
}

/// Runs `op` on a copy of the session under its lock and commits the copy
/// only once it is persisted.
async fn mutate<T: Send + 'static>(
    app: &Arc<AppState>,
    id: &str,
    op: impl FnOnce(&EditEngine, &mut EditSession) -> Result<(T, bool), ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    let shared = {
        let app = app.clone();
        let id = id.to_string();
        blocking(move || app.lookup(&id)).await?
    };
    let mut guard = shared.lock_owned().await;
    let app = app.clone();
    blocking(move || {
        let mut next = guard.clone();
        let (out, changed) = op(&app.engine, &mut next)?;
        if changed {
            app.store.save(&next)?;
            *guard = next;
        }
        Ok(out)
    })
    .await
}

async fn read<T: Send + 'static>(app: &Arc<AppState>, id: &str, f: impl FnOnce(&EditSession) -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    mutate(app, id, move |_, s| Ok((f(s)?, false))).await
}

async fn create(State(app): State<Arc<AppState>>, Json(req): Json<CreateRequest>) -> Result<(StatusCode, Json<CreateResponse>), ApiError> {
    let app2 = app.clone();
    let session = blocking(move || {
        let image = decode_b64_png("image", &req.image)?;
        let session = EditSession::create(&app2.engine, &image, &req.instruction)?;
        app2.store.save(&session)?;
        Ok(session)
    })
    .await?;
    let resp = CreateResponse {
        id: session.id.clone(),
        seg: B64.encode(encode_segmap_png(&session.seg_current)?),
        palette: session.palette().clone(),
        target: session.target_label.clone(),
        state: session.state,
        error: session.error.clone(),
    };
    app.sessions
        .lock()
        .expect("session map lock")
        .insert(session.id.clone(), Arc::new(AsyncMutex::new(session)));
    Ok((StatusCode::CREATED, Json(resp)))
}

async fn get_state(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    Ok(Json(read(&app, &id, |s| Ok(SessionView::of(s, None))).await?))
}

async fn get_input(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(png_response(read(&app, &id, |s| Ok(encode_png(&s.input)?)).await?))
}

async fn get_segmap(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let seg = read(&app, &id, |s| Ok(s.seg_current.clone())).await?;
    segmap_response(&seg)
}

async fn put_segmap(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Result<StatusCode, ApiError> {
    mutate(&app, &id, move |_, s| {
        let seg = decode_segmap_png(&body, s.palette().clone())?;
        s.update_segmap(&seg)?;
        Ok(((), true))
    })
    .await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn apply(State(app): State<Arc<AppState>>, Path(id): Path<String>, Json(req): Json<ApplyRequest>) -> Result<Json<ApplyResponse>, ApiError> {
    let sid = id.clone();
    let k = mutate(&app, &id, move |engine, s| {
        let background = match &req.background {
            Some(data) => Some(BackgroundInput {
                id: uuid::Uuid::new_v4().simple().to_string(),
                image: decode_b64_png("background", data)?,
            }),
            None => None,
        };
        Ok((s.apply(engine, &req.instruction, background)?, true))
    })
    .await?;
    Ok(Json(ApplyResponse {
        step_index: k,
        output_url: step_url(&sid, k, "output"),
        seg_out_url: step_url(&sid, k, "seg_out"),
    }))
}

async fn undo(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    Ok(Json(
        mutate(&app, &id, |_, s| {
            let moved = s.undo();
            Ok((SessionView::of(s, (!moved).then(|| "nothing to undo".to_string())), moved))
        })
        .await?,
    ))
}

async fn redo(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    Ok(Json(
        mutate(&app, &id, |_, s| {
            let moved = s.redo();
            Ok((SessionView::of(s, (!moved).then(|| "nothing to redo".to_string())), moved))
        })
        .await?,
    ))
}

fn step_or_404(s: &EditSession, k: usize) -> Result<&crate::session::EditStep, ApiError> {
    s.steps.get(k).ok_or_else(|| ApiError {
        status: StatusCode::NOT_FOUND,
        message: format!("session `{}` has {} steps, no step {k}", s.id, s.steps.len()),
        stage: None,
    })
}

async fn step_output(State(app): State<Arc<AppState>>, Path((id, k)): Path<(String, usize)>) -> Result<Response, ApiError> {
    Ok(png_response(read(&app, &id, move |s| Ok(encode_png(&step_or_404(s, k)?.output)?)).await?))
}

async fn step_seg_out(State(app): State<Arc<AppState>>, Path((id, k)): Path<(String, usize)>) -> Result<Response, ApiError> {
    let seg = read(&app, &id, move |s| Ok(step_or_404(s, k)?.seg_out.clone())).await?;
    segmap_response(&seg)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(get_state))
        .route("/sessions/{id}/input", get(get_input))
        .route("/sessions/{id}/segmap", get(get_segmap).put(put_segmap))
        .route("/sessions/{id}/apply", post(apply))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/redo", post(redo))
        .route("/sessions/{id}/steps/{k}/output", get(step_output))
        .route("/sessions/{id}/steps/{k}/seg_out", get(step_seg_out))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}
