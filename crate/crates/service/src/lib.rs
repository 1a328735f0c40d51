//! HTTP facade over the segmentation engine for interactive annotation.
//!
//! | method | path | |
//! |---|---|---|
//! | `POST` | `/sessions` | open a session on a volume: `{"path": ...}`, `{"phantom": {...}}` or `{"upload": {...}}` |
//! | `GET` | `/sessions/{id}/slice?axis=&index=&layer=image\|prob` | one plane as little-endian `f32`, size in `x-width` / `x-height` |
//! | `PUT` | `/sessions/{id}/points` | the six clicks, `{"points": {...}, "space": "voxel"}` |
//! | `POST` | `/sessions/{id}/segment` | start scribbles and the random walker |
//! | `POST` | `/sessions/{id}/refine` | start one training round on this session's own crop |
//! | `GET` | `/sessions/{id}/status` | revision, job state, round, last fit |
//! | `GET` | `/sessions/{id}/export` | zip of the hardened mask as `mask.json` + `mask.raw` |
//!
//! Segment and refine return `202` at once; poll `status` until the job is
//! idle or failed. Refinement trains only on the session's own crop, unlike
//! batch runs that train across many cases. Errors carry `{code, message}`.

mod error;
mod session;

use std::collections::HashMap;
use std::io::{Cursor, Write};
use std::net::SocketAddr;
use std::path::{Component, Path as FsPath, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;
use tower_http::cors::{Any, CorsLayer};

use xseg_core::phantom::{generate_phantom, PhantomSpec};
use xseg_core::pipeline::{initialize_case, run_round, GroundTruth, PipelineConfig, PointSource};
use xseg_core::points::{ExtremePoints, PointsFile};
use xseg_core::volume::io::{load_intensity, Dtype, Header};
use xseg_core::{Geometry, Volume3};

pub use error::ApiError;
pub use session::{JobKind, JobState, Status};
use session::Session;

pub const WIDTH_HEADER: &str = "x-width";
pub const HEIGHT_HEADER: &str = "x-height";

const LABELS: [&str; 6] = ["x_min", "x_max", "y_min", "y_max", "z_min", "z_max"];

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Root for volumes opened by path. Paths may not leave it.
    pub data_dir: PathBuf,
    /// Default configuration for new sessions.
    pub pipeline: PipelineConfig,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        Self {
            inner: Arc::new(Inner {
                config,
                sessions: Mutex::new(HashMap::new()),
                next_id: AtomicU64::new(1),
            }),
        }
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.inner
            .sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session {id:?}")))
    }

    fn insert(&self, session: Session) -> String {
        let id = format!("s{}", self.inner.next_id.fetch_add(1, Ordering::Relaxed));
        self.inner
            .sessions
            .lock()
            .unwrap()
            .insert(id.clone(), Arc::new(Mutex::new(session)));
        id
    }
}

pub fn router(state: AppState) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods(Any)
        .allow_headers(Any)
        .expose_headers([
            HeaderName::from_static(WIDTH_HEADER),
            HeaderName::from_static(HEIGHT_HEADER),
            header::CONTENT_DISPOSITION,
        ]);
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/slice", get(slice))
        .route("/sessions/{id}/points", put(set_points))
        .route("/sessions/{id}/segment", post(segment))
        .route("/sessions/{id}/refine", post(refine))
        .route("/sessions/{id}/status", get(status))
        .route("/sessions/{id}/export", get(export))
        .fallback(|| async { ApiError::not_found("no such route") })
        .layer(cors)
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, config: ServiceConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(AppState::new(config))).await
}

/// Syntax errors are the client's framing (400), shape errors its content (422).
fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => ApiError::unprocessable(e.to_string()),
        _ => ApiError::bad_request(e.to_string()),
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    path: Option<String>,
    phantom: Option<PhantomSpec>,
    upload: Option<Upload>,
    config: Option<PipelineConfig>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Upload {
    dims: [usize; 3],
    spacing: [f64; 3],
    /// Base64 of little-endian `f32`, x fastest.
    data: String,
}

fn resolve(data_dir: &FsPath, rel: &str) -> Result<PathBuf, ApiError> {
    let p = FsPath::new(rel);
    if p.as_os_str().is_empty() || !p.components().all(|c| matches!(c, Component::Normal(_))) {
        return Err(ApiError::unprocessable(format!(
            "volume path {rel:?} must be relative to the data directory"
        )));
    }
    Ok(data_dir.join(p))
}

fn decode_upload(u: Upload) -> Result<Volume3, ApiError> {
    let geom = Geometry::new(u.dims, u.spacing)?;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(u.data.as_bytes())
        .map_err(|e| ApiError::unprocessable(format!("upload data: {e}")))?;
    if bytes.len() != geom.len() * 4 {
        return Err(ApiError::unprocessable(format!(
            "upload holds {} bytes, dims need {}",
            bytes.len(),
            geom.len() * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Volume3::new(geom, data)?)
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateSession = parse_body(&body)?;
    let config = req.config.unwrap_or_else(|| state.inner.config.pipeline.clone());
    config.validate()?;
    let volume = match (req.path, req.phantom, req.upload) {
        (Some(rel), None, None) => {
            let path = resolve(&state.inner.config.data_dir, &rel)?;
            tokio::task::spawn_blocking(move || load_intensity(path))
                .await
                .map_err(|e| ApiError::internal(e.to_string()))??
        }
        (None, Some(spec), None) => generate_phantom(&spec)?.0,
        (None, None, Some(upload)) => decode_upload(upload)?,
        _ => {
            return Err(ApiError::unprocessable(
                "give exactly one of \"path\", \"phantom\" or \"upload\"",
            ))
        }
    };
    let dims = volume.dims();
    let spacing = volume.spacing();
    let id = state.insert(Session::new(volume, config));
    let body = json!({ "session_id": id, "dims": dims, "spacing": spacing });
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum Layer {
    #[default]
    Image,
    Prob,
}

#[derive(Deserialize)]
struct SliceQuery {
    axis: usize,
    index: usize,
    #[serde(default)]
    layer: Layer,
}

/// Plane `index` across `axis`, the lower remaining axis fastest.
fn plane(dims: [usize; 3], axis: usize, index: usize, value: impl Fn(usize) -> f32) -> (usize, usize, Vec<u8>) {
    let (u, v) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (w, h) = (dims[u], dims[v]);
    let mut out = Vec::with_capacity(w * h * 4);
    let mut c = [0usize; 3];
    c[axis] = index;
    for j in 0..h {
        c[v] = j;
        for i in 0..w {
            c[u] = i;
            let idx = c[0] + dims[0] * (c[1] + dims[1] * c[2]);
            out.extend_from_slice(&value(idx).to_le_bytes());
        }
    }
    (w, h, out)
}

async fn slice(
    State(state): State<AppState>,
    Path(id): Path<String>,
    query: Result<Query<SliceQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let session = state.session(&id)?;
    let s = session.lock().unwrap();
    let dims = s.volume.dims();
    if q.axis > 2 {
        return Err(ApiError::bad_request(format!("axis must be 0, 1 or 2, got {}", q.axis)));
    }
    if q.index >= dims[q.axis] {
        return Err(ApiError::not_found(format!(
            "index {} past the {} planes of axis {}",
            q.index, dims[q.axis], q.axis
        )));
    }
    let (w, h, bytes) = match q.layer {
        Layer::Image => {
            let data = s.volume.data();
            plane(dims, q.axis, q.index, |i| data[i])
        }
        Layer::Prob => {
            let prob = s
                .prob
                .as_ref()
                .ok_or_else(|| ApiError::precondition("no probability yet; run segment first"))?;
            let data = prob.data();
            plane(dims, q.axis, q.index, |i| data[i] as f32)
        }
    };
    let headers = [
        (header::CONTENT_TYPE, HeaderValue::from_static("application/octet-stream")),
        (HeaderName::from_static(WIDTH_HEADER), HeaderValue::from(w)),
        (HeaderName::from_static(HEIGHT_HEADER), HeaderValue::from(h)),
    ];
    Ok((headers, bytes).into_response())
}

fn parse_points(body: &[u8], dims: [usize; 3]) -> Result<ExtremePoints, ApiError> {
    let value: serde_json::Value = parse_body(body)?;
    let labels = value
        .get("points")
        .and_then(|p| p.as_object())
        .ok_or_else(|| ApiError::unprocessable("\"points\" must be an object of six labeled points"))?;
    let mut keys: Vec<&str> = labels.keys().map(String::as_str).collect();
    keys.sort_unstable();
    let mut want = LABELS;
    want.sort_unstable();
    if keys != want {
        return Err(ApiError::unprocessable(format!(
            "expected exactly the labels {LABELS:?}, got {keys:?}"
        )));
    }
    let file: PointsFile = serde_json::from_value(value).map_err(|e| ApiError::unprocessable(e.to_string()))?;
    let points = file.into_points()?;
    points.validate(dims)?;
    Ok(points)
}

async fn set_points(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let session = state.session(&id)?;
    let mut s = session.lock().unwrap();
    if s.is_busy() {
        return Err(ApiError::busy());
    }
    let points = parse_points(&body, s.volume.dims())?;
    s.points = Some(points);
    s.record = None;
    s.prob = None;
    s.round = None;
    s.last_dice = None;
    s.touch();
    Ok(Json(json!({ "points": points, "revision": s.revision() })).into_response())
}

fn accepted(s: &Session) -> Response {
    (StatusCode::ACCEPTED, Json(Status::from(s))).into_response()
}

/// Commits a job's result and its end state under one revision.
fn finish(session: &Mutex<Session>, outcome: Result<impl FnOnce(&mut Session), String>) {
    let mut s = session.lock().unwrap();
    s.job = match outcome {
        Ok(commit) => {
            commit(&mut s);
            JobState::Idle
        }
        Err(message) => JobState::Failed { message },
    };
    s.touch();
}

async fn segment(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = state.session(&id)?;
    let (volume, points, config) = {
        let mut s = session.lock().unwrap();
        if s.is_busy() {
            return Err(ApiError::busy());
        }
        let points = s
            .points
            .ok_or_else(|| ApiError::precondition("set the six extreme points before segmenting"))?;
        s.job = JobState::Running { kind: JobKind::Segment };
        s.touch();
        (Arc::clone(&s.volume), points, s.config.clone())
    };
    let worker = Arc::clone(&session);
    tokio::task::spawn_blocking(move || {
        let result = initialize_case(&id, (*volume).clone(), PointSource::Clicks(&points), &config, 0)
            .and_then(|record| Ok((record.pseudo_in_source()?, record)));
        let outcome = result
            .map(|(prob, record)| {
                move |s: &mut Session| {
                    s.prob = Some(prob);
                    s.record = Some(record);
                    s.round = Some(0);
                    s.last_dice = None;
                }
            })
            .map_err(|e| e.to_string());
        finish(&worker, outcome);
    });
    let s = session.lock().unwrap();
    Ok(accepted(&s))
}

async fn refine(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = state.session(&id)?;
    let (mut record, round, config) = {
        let mut s = session.lock().unwrap();
        if s.is_busy() {
            return Err(ApiError::busy());
        }
        let record = s
            .record
            .clone()
            .ok_or_else(|| ApiError::precondition("segment before refining"))?;
        let round = s.round.unwrap_or(0) + 1;
        s.job = JobState::Running { kind: JobKind::Refine };
        s.touch();
        (record, round, s.config.clone())
    };
    let worker = Arc::clone(&session);
    tokio::task::spawn_blocking(move || {
        let result = run_round(
            std::slice::from_mut(&mut record),
            &mut [],
            &GroundTruth::default(),
            &config,
            round,
        )
        .and_then(|out| Ok((out, record.pseudo_in_source()?)));
        let outcome = result
            .map(|(out, prob)| {
                move |s: &mut Session| {
                    s.prob = Some(prob);
                    s.record = Some(record);
                    s.round = Some(round);
                    s.last_dice = out.metrics.train_fit.mean;
                }
            })
            .map_err(|e| e.to_string());
        finish(&worker, outcome);
    });
    let s = session.lock().unwrap();
    Ok(accepted(&s))
}

async fn status(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Status>, ApiError> {
    let session = state.session(&id)?;
    let s = session.lock().unwrap();
    Ok(Json(Status::from(&*s)))
}

/// Zip archive holding `mask.json` and `mask.raw`.
fn mask_archive(header: &Header, payload: &[u8]) -> zip::result::ZipResult<Vec<u8>> {
    let mut zip = zip::ZipWriter::new(Cursor::new(Vec::new()));
    let opts = zip::write::SimpleFileOptions::default()
        .compression_method(zip::CompressionMethod::Stored);
    zip.start_file("mask.json", opts)?;
    zip.write_all(serde_json::to_string(header).expect("header serializes").as_bytes())?;
    zip.start_file("mask.raw", opts)?;
    zip.write_all(payload)?;
    Ok(zip.finish()?.into_inner())
}

async fn export(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = state.session(&id)?;
    let mask = {
        let s = session.lock().unwrap();
        s.prob
            .as_ref()
            .ok_or_else(|| ApiError::precondition("nothing to export; run segment first"))?
            .threshold(0.5)
    };
    let header = Header {
        dims: mask.dims(),
        spacing_mm: mask.spacing(),
        dtype: Dtype::U8,
    };
    let bytes = mask_archive(&header, mask.data()).map_err(|e| ApiError::internal(e.to_string()))?;
    let disposition = format!("attachment; filename=\"{id}_mask.zip\"");
    let headers = [
        (header::CONTENT_TYPE, HeaderValue::from_static("application/zip")),
        (
            header::CONTENT_DISPOSITION,
            HeaderValue::from_str(&disposition).map_err(|e| ApiError::internal(e.to_string()))?,
        ),
    ];
    Ok((headers, bytes).into_response())
}
