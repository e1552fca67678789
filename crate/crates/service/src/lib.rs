//! HTTP/JSON front end for the ROMANO simulator.
//!
//! Batch routes run one experiment or demo per request on the blocking pool.
//! Session routes keep a running scenario alive so that commands can be
//! injected and virtual time advanced step by step.

use std::collections::BTreeMap;
use std::net::Ipv6Addr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use romano_core::api::{
    AdvanceRequest, CommandRequest, DecodeRequest, DecodeResponse, EncodeRequest, EncodeResponse, ErrorBody,
    IdResponse, RobotState, RunRequest, SessionInfo,
};
use romano_core::codec::{self, RomanoId};
use romano_core::harness::{
    run_demo, run_scalability, run_sweep, run_throughput, DemoKind, DemoReport, ExperimentReport, HarnessError,
    Layout, RunOutput, ScalabilityReport, SweepReport, World,
};
use romano_core::time::Duration;

/// Upper bound on one advance request, in virtual milliseconds.
pub const MAX_ADVANCE_MS: u64 = 3_600_000;

#[derive(Debug)]
pub enum ApiError {
    Harness(HarnessError),
    BadRequest(String),
    NotFound(String),
    Internal(String),
}

impl From<HarnessError> for ApiError {
    fn from(e: HarnessError) -> Self {
        ApiError::Harness(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::Harness(e) => {
                let status = match e {
                    HarnessError::ConfigInvalid(_) => StatusCode::BAD_REQUEST,
                    HarnessError::UnknownTarget(_) => StatusCode::NOT_FOUND,
                    HarnessError::MagnitudeOutOfRange(_)
                    | HarnessError::Codec(_)
                    | HarnessError::EstablishTimeout(_)
                    | HarnessError::DemoAssertionFailed { .. } => StatusCode::UNPROCESSABLE_ENTITY,
                    HarnessError::Node(_) | HarnessError::Output(_) => StatusCode::INTERNAL_SERVER_ERROR,
                };
                (status, ErrorBody::from_harness(&e))
            }
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, ErrorBody { error: "bad_request".into(), message: m }),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, ErrorBody { error: "not_found".into(), message: m }),
            ApiError::Internal(m) => {
                (StatusCode::INTERNAL_SERVER_ERROR, ErrorBody { error: "internal".into(), message: m })
            }
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

type Session = Arc<Mutex<World>>;

#[derive(Default)]
pub struct AppState {
    sessions: Mutex<BTreeMap<u64, Session>>,
    next_id: AtomicU64,
}

impl AppState {
    fn session(&self, id: u64) -> Result<Session, ApiError> {
        lock(&self.sessions).get(&id).cloned().ok_or_else(|| ApiError::NotFound(format!("no session {id}")))
    }
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Internal(e.to_string()))?
}

fn strip_traces<R>(mut out: RunOutput<R>, keep: bool) -> RunOutput<R> {
    if !keep {
        out.wire_trace.clear();
        out.poses.clear();
    }
    out
}

/// Serves the router on an already bound listener until the future is dropped.
pub async fn serve(listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, app()).await
}

pub fn app() -> Router {
    app_with_state(Arc::new(AppState::default()))
}

pub fn app_with_state(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/codec/encode", post(encode))
        .route("/codec/decode", post(decode))
        .route("/romano-id", get(romano_id))
        .route("/experiments/throughput", post(throughput))
        .route("/experiments/scalability", post(scalability))
        .route("/experiments/sweep", post(sweep))
        .route("/demos/{demo}", post(demo))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/commands", post(command))
        .route("/sessions/{id}/advance", post(advance))
        .with_state(state)
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    version: &'static str,
}

async fn health() -> Json<Health> {
    Json(Health { status: "ok", version: env!("CARGO_PKG_VERSION") })
}

async fn encode(Json(req): Json<EncodeRequest>) -> ApiResult<EncodeResponse> {
    let bytes = codec::encode(&req.message).map_err(HarnessError::from)?;
    Ok(Json(EncodeResponse { hex: hex::encode(&bytes), len: bytes.len() }))
}

async fn decode(Json(req): Json<DecodeRequest>) -> ApiResult<DecodeResponse> {
    let bytes = hex::decode(req.hex.trim()).map_err(|e| ApiError::BadRequest(format!("hex: {e}")))?;
    let message = codec::decode(&bytes).map_err(HarnessError::from)?;
    Ok(Json(DecodeResponse { message }))
}

#[derive(Deserialize)]
struct IdQuery {
    address: String,
}

async fn romano_id(Query(q): Query<IdQuery>) -> ApiResult<IdResponse> {
    let addr: Ipv6Addr = q.address.parse().map_err(|_| {
        ApiError::Harness(HarnessError::Codec(codec::CodecError::MalformedAddress(q.address.clone())))
    })?;
    Ok(Json(IdResponse { address: q.address, romano_id: RomanoId::derive(&addr) }))
}

async fn throughput(Json(req): Json<RunRequest>) -> ApiResult<RunOutput<ExperimentReport>> {
    let cfg = req.config()?;
    let out = blocking(move || Ok(run_throughput(&cfg)?)).await?;
    Ok(Json(strip_traces(out, req.traces)))
}

async fn scalability(Json(req): Json<RunRequest>) -> ApiResult<RunOutput<ScalabilityReport>> {
    let cfg = req.config()?;
    let out = blocking(move || Ok(run_scalability(&cfg)?)).await?;
    Ok(Json(strip_traces(out, req.traces)))
}

async fn sweep(Json(req): Json<RunRequest>) -> ApiResult<SweepReport> {
    let cfg = req.config()?;
    Ok(Json(blocking(move || Ok(run_sweep(&cfg)?)).await?))
}

/// Demo failures are reported in the body (`report.passed`), not as an HTTP error.
async fn demo(Path(demo): Path<String>, Json(req): Json<RunRequest>) -> ApiResult<RunOutput<DemoReport>> {
    let kind: DemoKind = demo.parse()?;
    let cfg = req.config()?;
    let out = blocking(move || Ok(run_demo(&cfg, kind)?)).await?;
    Ok(Json(strip_traces(out, req.traces)))
}

fn info(id: u64, w: &World) -> SessionInfo {
    SessionInfo {
        id,
        now_us: w.now().as_micros(),
        robots: w
            .robots()
            .iter()
            .map(|r| RobotState {
                robot: r.index,
                network: r.network,
                romano_id: r.node.id(),
                ready: r.node.is_ready(),
                pose: r.controller.pose_at(w.now()),
                executed: r.controller.executed().len(),
            })
            .collect(),
    }
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Json(req): Json<RunRequest>,
) -> Result<(StatusCode, Json<SessionInfo>), ApiError> {
    let cfg = req.config()?;
    let world = blocking(move || {
        let n = cfg.robots;
        let mut w = World::new(cfg, Layout::single(n))?;
        w.start();
        w.run_until_ready()?;
        Ok(w)
    })
    .await?;
    let id = state.next_id.fetch_add(1, Ordering::Relaxed) + 1;
    let body = info(id, &world);
    lock(&state.sessions).insert(id, Arc::new(Mutex::new(world)));
    tracing::info!(session = id, "session created");
    Ok((StatusCode::CREATED, Json(body)))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<u64>) -> ApiResult<SessionInfo> {
    let s = state.session(id)?;
    let w = lock(&s);
    Ok(Json(info(id, &w)))
}

async fn delete_session(State(state): State<Arc<AppState>>, Path(id): Path<u64>) -> Result<StatusCode, ApiError> {
    match lock(&state.sessions).remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::NotFound(format!("no session {id}"))),
    }
}

async fn command(
    State(state): State<Arc<AppState>>,
    Path(id): Path<u64>,
    Json(req): Json<CommandRequest>,
) -> ApiResult<SessionInfo> {
    let s = state.session(id)?;
    let mut w = lock(&s);
    if req.network >= w.network_count() {
        return Err(ApiError::BadRequest(format!("no network {}", req.network)));
    }
    w.command(req.network, &req.target, req.movement, req.magnitude)?;
    Ok(Json(info(id, &w)))
}

async fn advance(
    State(state): State<Arc<AppState>>,
    Path(id): Path<u64>,
    Json(req): Json<AdvanceRequest>,
) -> ApiResult<SessionInfo> {
    if req.ms > MAX_ADVANCE_MS {
        return Err(ApiError::BadRequest(format!("advance of {} ms exceeds {MAX_ADVANCE_MS}", req.ms)));
    }
    let s = state.session(id)?;
    let body = blocking(move || {
        let mut w = lock(&s);
        w.run_for(Duration::from_millis(req.ms));
        Ok(info(id, &w))
    })
    .await?;
    Ok(Json(body))
}
