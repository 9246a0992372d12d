//! HTTP/JSON front end for `descattn-core`.
//!
//! Stateless endpoints map one request to one core call. Streaming sessions
//! keep a [`Streamer`] per id; chunks travel as binary sequence dumps.
//!
//! | method | path | body | response |
//! |---|---|---|---|
//! | GET | `/health` | | `Health` |
//! | POST | `/v1/verify` | `VerifyRequest` | `VerifyReport` |
//! | POST | `/v1/flops` | `FlopsRequest` | `FlopsResponse` |
//! | POST | `/v1/forward` | `ForwardRequest` | `ForwardResponse` |
//! | POST | `/v1/compare` | `RunRequest` | `ErrorReport` |
//! | POST | `/v1/histogram` | `HistogramRequest` | `HistogramResponse` |
//! | POST | `/v1/bench` | `BenchSpec` | `BenchReport` |
//! | POST | `/v1/streams` | `StreamCreate` | `StreamCreated` |
//! | POST | `/v1/streams/{id}/chunks` | dump bytes | dump bytes |
//! | GET | `/v1/streams/{id}/cache` | | `CacheReport` |
//! | DELETE | `/v1/streams/{id}` | | 204 |

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::net::TcpListener;

use descattn_core::api::{self, ApiError, Health, StreamCreate, StreamCreated};
use descattn_core::bench::{sweep, BenchSpec};
use descattn_core::streaming::{CacheReport, Streamer};
use descattn_core::tokens::{load_dump, save_dump};
use descattn_core::{Error, Precision};

/// Largest accepted request body.
pub const MAX_BODY_BYTES: usize = 512 * 1024 * 1024;

enum Session {
    F32(Streamer<f32>),
    F64(Streamer<f64>),
}

impl Session {
    fn step(&mut self, dump: &[u8]) -> Result<Vec<u8>, Error> {
        match self {
            Session::F32(s) => Ok(save_dump(&s.step(&load_dump::<f32>(dump)?)?)),
            Session::F64(s) => Ok(save_dump(&s.step(&load_dump::<f64>(dump)?)?)),
        }
    }

    fn report(&self) -> CacheReport {
        match self {
            Session::F32(s) => s.report(),
            Session::F64(s) => s.report(),
        }
    }
}

#[derive(Clone, Default)]
pub struct AppState {
    sessions: Arc<Mutex<HashMap<String, Arc<Mutex<Session>>>>>,
}

impl AppState {
    pub fn session_count(&self) -> usize {
        self.sessions.lock().len()
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, AppError> {
        self.sessions
            .lock()
            .get(id)
            .cloned()
            .ok_or_else(|| AppError::not_found(id))
    }
}

pub struct AppError {
    status: StatusCode,
    body: ApiError,
}

impl AppError {
    fn not_found(id: &str) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            body: ApiError {
                error: format!("no stream with id `{id}`"),
                kind: "not_found".into(),
            },
        }
    }

    fn internal(msg: String) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            body: ApiError {
                error: msg,
                kind: "internal".into(),
            },
        }
    }
}

impl From<Error> for AppError {
    fn from(e: Error) -> Self {
        let status = if e.is_usage() {
            StatusCode::UNPROCESSABLE_ENTITY
        } else {
            StatusCode::INTERNAL_SERVER_ERROR
        };
        Self {
            status,
            body: ApiError::from(&e),
        }
    }
}

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

/// Runs CPU-bound work off the async executor.
async fn blocking<R: Send + 'static>(f: impl FnOnce() -> Result<R, Error> + Send + 'static) -> Result<R, AppError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| AppError::internal(format!("worker failed: {e}")))?
        .map_err(AppError::from)
}

async fn json_call<Req, Resp>(req: Req, f: fn(&Req) -> Result<Resp, Error>) -> Result<Json<Resp>, AppError>
where
    Req: DeserializeOwned + Send + 'static,
    Resp: Serialize + Send + 'static,
{
    blocking(move || f(&req)).await.map(Json)
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

async fn verify(Json(req): Json<api::VerifyRequest>) -> Result<Json<descattn_core::verify::VerifyReport>, AppError> {
    json_call(req, |r| Ok(api::verify(r))).await
}

async fn flops(Json(req): Json<api::FlopsRequest>) -> Result<Json<api::FlopsResponse>, AppError> {
    json_call(req, api::flops).await
}

async fn forward(Json(req): Json<api::ForwardRequest>) -> Result<Json<api::ForwardResponse>, AppError> {
    json_call(req, api::forward).await
}

async fn compare(Json(req): Json<api::RunRequest>) -> Result<Json<descattn_core::analysis::ErrorReport>, AppError> {
    json_call(req, api::compare).await
}

async fn histogram(Json(req): Json<api::HistogramRequest>) -> Result<Json<api::HistogramResponse>, AppError> {
    json_call(req, api::histogram).await
}

async fn bench(Json(spec): Json<BenchSpec>) -> Result<Json<descattn_core::bench::BenchReport>, AppError> {
    json_call(spec, |s| Ok(sweep(s))).await
}

async fn create_stream(
    State(state): State<AppState>,
    Json(req): Json<StreamCreate>,
) -> Result<(StatusCode, Json<StreamCreated>), AppError> {
    let session = match req.precision {
        Precision::F32 => Session::F32(Streamer::new(req.config)?),
        Precision::F64 => Session::F64(Streamer::new(req.config)?),
    };
    let id = uuid::Uuid::new_v4().to_string();
    state.sessions.lock().insert(id.clone(), Arc::new(Mutex::new(session)));
    tracing::info!(%id, precision = %req.precision, "stream created");
    Ok((
        StatusCode::CREATED,
        Json(StreamCreated {
            id,
            config: req.config,
            precision: req.precision,
        }),
    ))
}

async fn push_chunk(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, AppError> {
    let session = state.session(&id)?;
    let out = blocking(move || session.lock().step(&body)).await?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], out).into_response())
}

async fn cache_report(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<CacheReport>, AppError> {
    let session = state.session(&id)?;
    blocking(move || Ok(session.lock().report())).await.map(Json)
}

async fn delete_stream(State(state): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, AppError> {
    match state.sessions.lock().remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(AppError::not_found(&id)),
    }
}

pub fn app() -> Router {
    app_with_state(AppState::default())
}

pub fn app_with_state(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/verify", post(verify))
        .route("/v1/flops", post(flops))
        .route("/v1/forward", post(forward))
        .route("/v1/compare", post(compare))
        .route("/v1/histogram", post(histogram))
        .route("/v1/bench", post(bench))
        .route("/v1/streams", post(create_stream))
        .route("/v1/streams/{id}/chunks", post(push_chunk))
        .route("/v1/streams/{id}/cache", get(cache_report))
        .route("/v1/streams/{id}", delete(delete_stream))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

pub async fn serve(listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, app()).await
}

/// Binds `addr` and serves on a background task; returns the bound address.
pub async fn spawn(addr: &str) -> std::io::Result<std::net::SocketAddr> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    tokio::spawn(async move {
        if let Err(e) = serve(listener).await {
            tracing::error!(error = %e, "server stopped");
        }
    });
    Ok(local)
}
