//! Read-only HTTP API over a completed artifact tree.
//!
//! | endpoint | reply |
//! |---|---|
//! | `GET /models` | registry entries with artifact presence |
//! | `GET /embeddings/{model}?reducer=` | reduced points with per-point labels |
//! | `GET /spectrogram?file&start&end&model` | dB matrix JSON, or PNG for `Accept: image/png` |
//! | `GET /audio?file&start&end[&model]` | float32 WAV of the slice |
//! | `GET /metrics/{clustering,probes,benchmark}?model` | persisted evaluation JSON |
//! | `GET /heatmap?model&class[&source]` | date × hour event counts |
//! | `POST /selection/export` | CSV written under `evaluations/selections/` |
//!
//! Errors are JSON `{"error": ..., "missing": [...]}`. The audio endpoints
//! answer 409 without an audio root, 416 for intervals outside the file
//! (plus one model window of padding) and 413 above 120 s.

mod error;
mod session;

use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tokio::net::TcpListener;

pub use error::ApiError;
pub use session::{
    ApiSession, EmbeddingsQuery, ExportPoint, ExportRequest, HeatmapQuery, ModelQuery, Reply,
    SliceQuery, MAX_SLICE_S,
};

type Shared = Arc<ApiSession>;

impl IntoResponse for Reply {
    fn into_response(self) -> Response {
        match self {
            Reply::Json(v) => Json(v).into_response(),
            Reply::Bytes { content_type, body } => {
                ([(header::CONTENT_TYPE, content_type)], body).into_response()
            }
        }
    }
}

/// Run `f` on the blocking pool; artifact reads and audio decoding are
/// synchronous.
async fn blocking<F>(session: Shared, f: F) -> Response
where
    F: FnOnce(&ApiSession) -> Result<Reply, ApiError> + Send + 'static,
{
    match tokio::task::spawn_blocking(move || f(&session)).await {
        Ok(Ok(reply)) => reply.into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError::internal(format!("request task failed: {e}")).into_response(),
    }
}

async fn root() -> Json<serde_json::Value> {
    Json(json!({
        "endpoints": [
            "GET /models",
            "GET /embeddings/{model}?reducer=",
            "GET /spectrogram?file&start&end&model",
            "GET /audio?file&start&end&model",
            "GET /metrics/{clustering|probes|benchmark}?model",
            "GET /heatmap?model&class&source",
            "POST /selection/export",
        ]
    }))
}

async fn models(State(s): State<Shared>) -> Response {
    blocking(s, |s| s.models()).await
}

async fn embeddings(
    State(s): State<Shared>,
    Path(model): Path<String>,
    Query(q): Query<EmbeddingsQuery>,
) -> Response {
    blocking(s, move |s| s.embeddings(&model, &q)).await
}

async fn spectrogram(
    State(s): State<Shared>,
    headers: HeaderMap,
    Query(q): Query<SliceQuery>,
) -> Response {
    let want_png = headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("image/png"));
    blocking(s, move |s| s.spectrogram(&q, want_png)).await
}

async fn audio(State(s): State<Shared>, Query(q): Query<SliceQuery>) -> Response {
    blocking(s, move |s| s.audio(&q)).await
}

async fn metrics(
    State(s): State<Shared>,
    Path(kind): Path<String>,
    Query(q): Query<ModelQuery>,
) -> Response {
    blocking(s, move |s| s.metrics(&kind, &q)).await
}

async fn heatmap(State(s): State<Shared>, Query(q): Query<HeatmapQuery>) -> Response {
    blocking(s, move |s| s.heatmap(&q)).await
}

async fn export(State(s): State<Shared>, Json(req): Json<ExportRequest>) -> Response {
    blocking(s, move |s| s.export(&req)).await
}

pub fn router(session: Arc<ApiSession>) -> Router {
    Router::new()
        .route("/", get(root))
        .route("/models", get(models))
        .route("/embeddings/{model}", get(embeddings))
        .route("/spectrogram", get(spectrogram))
        .route("/audio", get(audio))
        .route("/metrics/{kind}", get(metrics))
        .route("/heatmap", get(heatmap))
        .route("/selection/export", post(export))
        .with_state(session)
}

/// Serve until `shutdown` resolves.
pub async fn serve<F>(listener: TcpListener, session: Arc<ApiSession>, shutdown: F) -> std::io::Result<()>
where
    F: std::future::Future<Output = ()> + Send + 'static,
{
    axum::serve(listener, router(session))
        .with_graceful_shutdown(shutdown)
        .await
}
