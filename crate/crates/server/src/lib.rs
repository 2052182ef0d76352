//! HTTP inference service.
//!
//! `POST /api/generate` takes a PNG sketch and answers with the generated
//! PNG. `GET /api/health` reports readiness and the loaded model. Errors are
//! JSON bodies of the form `{"error": {"code": ..., "message": ...}}` with a
//! code from [`ErrorCode`].

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use haifit_core::imageio::{decode_png_rgb, encode_png};
use haifit_core::inference::Model;
use serde::Serialize;
use tokio::sync::Semaphore;

pub const FINGERPRINT_HEADER: &str = "x-haifit-fingerprint";
pub const INFERENCE_MS_HEADER: &str = "x-haifit-inference-ms";
pub const DEFAULT_MAX_BYTES: usize = 4 * 1024 * 1024;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub addr: SocketAddr,
    pub checkpoint: PathBuf,
    pub max_bytes: usize,
    pub max_in_flight: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadImage,
    TooLarge,
    NoModel,
    Internal,
}

impl ErrorCode {
    pub fn status(self) -> StatusCode {
        match self {
            ErrorCode::BadImage => StatusCode::BAD_REQUEST,
            ErrorCode::TooLarge => StatusCode::PAYLOAD_TOO_LARGE,
            ErrorCode::NoModel => StatusCode::SERVICE_UNAVAILABLE,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug, Serialize)]
struct ErrorDetail {
    code: ErrorCode,
    message: String,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: ErrorDetail,
}

fn error_response(code: ErrorCode, message: impl Into<String>) -> Response {
    let body = ErrorBody {
        error: ErrorDetail {
            code,
            message: message.into(),
        },
    };
    (code.status(), Json(body)).into_response()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Health {
    pub status: &'static str,
    pub fingerprint: Option<String>,
    pub schedule: Option<Vec<usize>>,
    pub finest_resolution: Option<usize>,
    pub output_resolution: Option<usize>,
    pub uptime_s: f64,
}

/// Shared service state. The model is set once and read-only afterwards.
#[derive(Debug)]
pub struct AppState {
    model: OnceLock<Arc<Model>>,
    started: Instant,
    max_bytes: usize,
    in_flight: Semaphore,
    device: Mutex<()>,
}

impl AppState {
    pub fn new(max_bytes: usize, max_in_flight: usize) -> Arc<Self> {
        Arc::new(Self {
            model: OnceLock::new(),
            started: Instant::now(),
            max_bytes,
            in_flight: Semaphore::new(max_in_flight.max(1)),
            device: Mutex::new(()),
        })
    }

    /// Installs the model. Later calls are ignored.
    pub fn set_model(&self, model: Model) {
        let _ = self.model.set(Arc::new(model));
    }

    pub fn model(&self) -> Option<&Arc<Model>> {
        self.model.get()
    }

    pub fn health(&self) -> Health {
        let model = self.model();
        Health {
            status: if model.is_some() { "ready" } else { "loading" },
            fingerprint: model.map(|m| m.fingerprint().to_string()),
            schedule: model.map(|m| m.schedule().levels().to_vec()),
            finest_resolution: model.map(|m| m.schedule().finest()),
            output_resolution: model.map(|m| m.output_resolution()),
            uptime_s: self.started.elapsed().as_secs_f64(),
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/generate", post(handle_generate))
        .route("/api/health", get(handle_health))
        .layer(DefaultBodyLimit::disable())
        .with_state(state)
}

async fn handle_health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(state.health())
}

async fn handle_generate(State(state): State<Arc<AppState>>, request: Request) -> Response {
    let Some(model) = state.model().cloned() else {
        return error_response(ErrorCode::NoModel, "model not loaded");
    };
    let limit = state.max_bytes;
    let body: Bytes = match axum::body::to_bytes(request.into_body(), limit).await {
        Ok(b) => b,
        Err(_) => return error_response(ErrorCode::TooLarge, format!("body exceeds {limit} bytes")),
    };
    let sketch = match decode_png_rgb(&body) {
        Ok(img) => img,
        Err(e) => return error_response(ErrorCode::BadImage, e.to_string()),
    };
    let _permit = state.in_flight.acquire().await.expect("semaphore never closed");
    let worker = Arc::clone(&state);
    let result = tokio::task::spawn_blocking(move || {
        let _device = worker.device.lock().unwrap_or_else(|p| p.into_inner());
        let t = Instant::now();
        let png = model.generate(&sketch).and_then(|img| encode_png(&img));
        (png, t.elapsed().as_secs_f64() * 1000.0, model)
    })
    .await;
    let (png, ms, model) = match result {
        Ok(r) => r,
        Err(e) => return error_response(ErrorCode::Internal, e.to_string()),
    };
    match png {
        Ok(png) => {
            let mut resp = Response::new(Body::from(png));
            let h = resp.headers_mut();
            h.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
            h.insert(FINGERPRINT_HEADER, HeaderValue::from_str(model.fingerprint()).expect("hex is ascii"));
            h.insert(INFERENCE_MS_HEADER, HeaderValue::from_str(&format!("{ms:.3}")).expect("ascii"));
            resp
        }
        Err(e) => error_response(ErrorCode::Internal, e.to_string()),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("cannot load checkpoint {path}: {source}")]
    Load {
        path: PathBuf,
        source: haifit_core::Error,
    },
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

/// Binds, loads the checkpoint, and serves until ctrl-c. The listening
/// address is printed to stdout once bound. Health reports `loading` until
/// the checkpoint is in memory; a checkpoint that fails to load ends the
/// process with an error.
pub async fn serve(config: ServiceConfig) -> Result<(), ServeError> {
    let listener = tokio::net::TcpListener::bind(config.addr)
        .await
        .map_err(|source| ServeError::Bind {
            addr: config.addr,
            source,
        })?;
    let addr = listener.local_addr()?;
    println!("listening on http://{addr}");
    let state = AppState::new(config.max_bytes, config.max_in_flight);
    let app = router(Arc::clone(&state));
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async move {
                tokio::select! {
                    _ = stop_rx => {}
                    _ = tokio::signal::ctrl_c() => {}
                }
            })
            .await
    });

    let path = config.checkpoint.clone();
    let loaded = tokio::task::spawn_blocking(move || Model::load(&path))
        .await
        .expect("loader task does not panic");
    match loaded {
        Ok(model) => {
            log::info!("loaded model {} from {}", model.fingerprint(), config.checkpoint.display());
            state.set_model(model);
        }
        Err(source) => {
            let _ = stop_tx.send(());
            let _ = server.await;
            return Err(ServeError::Load {
                path: config.checkpoint,
                source,
            });
        }
    }
    let _keep = stop_tx;
    server.await.expect("server task does not panic")?;
    Ok(())
}
