//! HTTP binding: `POST /sessions`, `POST /sessions/{id}/messages`, `GET /sessions/{id}`.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use super::{Service, Session, TurnResult};
use crate::error::Error;

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MessageBody {
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

pub struct ApiError(Error);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::SessionNotFound(_) => StatusCode::NOT_FOUND,
            Error::ServiceUnavailable => StatusCode::SERVICE_UNAVAILABLE,
            Error::InvalidArgument(_) | Error::Empty(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(ErrorBody { error: self.0.to_string() })).into_response()
    }
}

type Shared = Arc<Service<f32>>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> crate::Result<T> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(Error::InvalidArgument(format!("request task failed: {e}"))))?
        .map_err(ApiError)
}

async fn create(State(svc): State<Shared>) -> Result<(StatusCode, Json<Created>), ApiError> {
    let s = svc.create_session().map_err(ApiError)?;
    Ok((StatusCode::CREATED, Json(Created { id: s.id })))
}

async fn message(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    Json(body): Json<MessageBody>,
) -> Result<Json<TurnResult>, ApiError> {
    if body.text.trim().is_empty() {
        return Err(ApiError(Error::InvalidArgument("message text is empty".into())));
    }
    blocking(move || svc.post_message(&id, &body.text)).await.map(Json)
}

async fn state(State(svc): State<Shared>, Path(id): Path<String>) -> Result<Json<Session>, ApiError> {
    svc.get_state(&id).map(Json).map_err(ApiError)
}

pub fn router(service: Shared) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}/messages", post(message))
        .route("/sessions/{id}", get(state))
        .with_state(service)
}

pub async fn serve(service: Shared, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(service)).await
}
