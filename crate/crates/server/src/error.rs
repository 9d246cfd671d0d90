use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use concept_audit::report::ReportError;
use concept_audit::MetricsError;
use serde::Serialize;

/// Error returned by every endpoint, rendered as `{"error": ..., "message": ...}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    message: &'a str,
}

impl ApiError {
    pub fn unknown_run(id: &str) -> Self {
        Self { status: StatusCode::NOT_FOUND, code: "UnknownRun", message: format!("no run with id `{id}`") }
    }

    pub fn unknown_concept(label: &str) -> Self {
        Self { status: StatusCode::NOT_FOUND, code: "UnknownConcept", message: format!("unknown concept `{label}`") }
    }

    pub fn unknown_image(id: &str) -> Self {
        Self { status: StatusCode::NOT_FOUND, code: "UnknownImage", message: format!("no media for image `{id}`") }
    }

    pub fn bad_param(message: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, code: "BadParam", message: message.into() }
    }
}

impl From<MetricsError> for ApiError {
    fn from(err: MetricsError) -> Self {
        let message = err.to_string();
        match err {
            MetricsError::InvalidParameter { .. } => Self::bad_param(message),
            MetricsError::UnknownConcept(_) => Self { status: StatusCode::NOT_FOUND, code: "UnknownConcept", message },
            MetricsError::UnknownPrompt(_) => Self { status: StatusCode::NOT_FOUND, code: "UnknownPrompt", message },
            MetricsError::EmptyCorpus
            | MetricsError::EmptyPrompt(_)
            | MetricsError::NotEnoughImages { .. }
            | MetricsError::ZeroTotalWeight => {
                Self { status: StatusCode::UNPROCESSABLE_ENTITY, code: "DataError", message }
            }
        }
    }
}

impl From<ReportError> for ApiError {
    fn from(err: ReportError) -> Self {
        match err {
            ReportError::Metrics(e) => e.into(),
            other => Self::bad_param(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { error: self.code, message: &self.message };
        (self.status, Json(body)).into_response()
    }
}
