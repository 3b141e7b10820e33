use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use serde::Serialize;
use serde_json::Value;

/// Error body sent for every failed request.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorBody {
    pub code: &'static str,
    pub message: String,
    pub detail: Value,
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{message}")]
    Protocol { message: String, current_trial: usize },
    #[error("{0}")]
    Gone(String),
    #[error("{0}")]
    ComprehensionRequired(String),
    #[error("storage failure: {0}")]
    Storage(#[from] std::io::Error),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict(_) | ApiError::Protocol { .. } => StatusCode::CONFLICT,
            ApiError::Gone(_) => StatusCode::GONE,
            ApiError::ComprehensionRequired(_) => StatusCode::FORBIDDEN,
            ApiError::Storage(_) | ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ApiError::BadRequest(_) => "bad_request",
            ApiError::Validation(_) => "validation_error",
            ApiError::NotFound(_) => "not_found",
            ApiError::Conflict(_) => "conflict",
            ApiError::Protocol { .. } => "protocol_error",
            ApiError::Gone(_) => "gone",
            ApiError::ComprehensionRequired(_) => "comprehension_required",
            ApiError::Storage(_) => "storage_error",
            ApiError::Internal(_) => "internal_error",
        }
    }

    pub fn body(&self) -> ErrorBody {
        let detail = match self {
            ApiError::Protocol { current_trial, .. } => serde_json::json!({ "current_trial": current_trial }),
            _ => Value::Null,
        };
        ErrorBody {
            code: self.code(),
            message: self.to_string(),
            detail,
        }
    }
}

impl From<repscope::error::Error> for ApiError {
    fn from(e: repscope::error::Error) -> Self {
        use repscope::error::Error as E;
        match e {
            E::Io(io) => ApiError::Storage(io),
            E::Parse { .. } | E::Json(_) | E::Csv(_) => ApiError::BadRequest(e.to_string()),
            E::Validation(_)
            | E::InvalidArgument(_)
            | E::InsufficientData(_)
            | E::DimensionMismatch { .. }
            | E::AtTrial { .. }
            | E::InRepresentation { .. } => ApiError::Validation(e.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if matches!(self, ApiError::Storage(_) | ApiError::Internal(_)) {
            log::error!("{self}");
        }
        (self.status(), axum::Json(self.body())).into_response()
    }
}

pub type ApiResult<T> = std::result::Result<T, ApiError>;
