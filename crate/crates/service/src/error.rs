use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use caplens_core::Error;
use serde_json::json;

/// Core error with the HTTP status it maps to.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }

    /// Mapping used by steering endpoints: invalid input is 422 and any
    /// failure on the model side is 502.
    pub fn steering(e: Error) -> Self {
        let status = match &e {
            Error::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::BAD_GATEWAY,
        };
        Self {
            status,
            message: e.to_string(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Validation(_) | Error::Parse(_) => StatusCode::BAD_REQUEST,
            Error::Conflict(_) => StatusCode::CONFLICT,
            Error::Adapter(_) => StatusCode::BAD_GATEWAY,
            Error::Data(_) | Error::Io(_) | Error::Json(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

/// CLI exit status: 2 for model failures, 1 for everything else.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Adapter(_) => 2,
        _ => 1,
    }
}
