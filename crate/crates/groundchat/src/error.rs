use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use groundchat_core::Error as CoreError;

use crate::api::ErrorBody;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("session {0} not found")]
    NotFound(String),

    #[error("{0}")]
    Validation(String),

    #[error("expansion backend: {0}")]
    Backend(String),

    #[error("storage: {0}")]
    Store(String),

    #[error("{0}")]
    Internal(String),
}

impl From<CoreError> for ServiceError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Backend { .. } | CoreError::Capability { .. } => ServiceError::Backend(e.to_string()),
            CoreError::Contract(_) | CoreError::Integrity(_) | CoreError::Length { .. } => {
                ServiceError::Validation(e.to_string())
            }
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Validation(_) => StatusCode::BAD_REQUEST,
            ServiceError::Backend(_) => StatusCode::BAD_GATEWAY,
            ServiceError::Store(_) | ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Validation(_) => "validation",
            ServiceError::Backend(_) => "backend",
            ServiceError::Store(_) => "store",
            ServiceError::Internal(_) => "internal",
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        if self.status().is_server_error() {
            log::error!("{self}");
        }
        let body = ErrorBody {
            error: self.kind().to_string(),
            message: self.to_string(),
        };
        (self.status(), Json(body)).into_response()
    }
}
