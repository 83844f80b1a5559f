use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use noisenet_core::Error;
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("no model is active")]
    NoActiveModel,
    #[error("unknown model version `{0}`")]
    UnknownVersion(String),
    #[error("model version `{0}` is still training")]
    VersionNotReady(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("internal: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Core(e) => e.code(),
            ServiceError::NoActiveModel => "NoActiveModel",
            ServiceError::UnknownVersion(_) => "UnknownVersion",
            ServiceError::VersionNotReady(_) => "VersionNotReady",
            ServiceError::BadRequest(_) => "BadRequest",
            ServiceError::Config(_) => "InvalidConfig",
            ServiceError::Internal(_) => "Internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::Core(e) => match e {
                Error::MalformedRecord { .. }
                | Error::SchemaViolation { .. }
                | Error::EventTooShort { .. }
                | Error::DegenerateEvent(_)
                | Error::InvalidDistribution(_)
                | Error::InvalidConfig(_)
                | Error::ShapeMismatch(_) => StatusCode::BAD_REQUEST,
                Error::DuplicateEventId { .. } | Error::AlreadyLabeled(_) => StatusCode::CONFLICT,
                Error::UnknownEvent(_) => StatusCode::NOT_FOUND,
                Error::NotEnoughNewLabels { .. } => StatusCode::PRECONDITION_FAILED,
                Error::QueueFull(_) => StatusCode::SERVICE_UNAVAILABLE,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
            ServiceError::NoActiveModel => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::UnknownVersion(_) => StatusCode::NOT_FOUND,
            ServiceError::VersionNotReady(_) => StatusCode::CONFLICT,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Config(_) | ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            tracing::error!(code = self.code(), "{self}");
        }
        let body = json!({ "error": { "code": self.code(), "message": self.to_string() } });
        (status, Json(body)).into_response()
    }
}
