use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;
use thiserror::Error;

use reflex_core::backends::ConfigError;
use reflex_core::dpo::DpoError;
use reflex_core::store::StoreError;
use reflex_core::EngineError;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("unknown schema `{0}`")]
    UnknownSchema(String),
    #[error("unknown persona `{0}`")]
    UnknownPersona(String),
    #[error("no session `{0}`")]
    SessionNotFound(String),
    #[error("no round {0} in this session")]
    RoundNotFound(u32),
    #[error("no image `{0}`")]
    ImageNotFound(String),
    #[error("a round is already running for this session")]
    RoundInFlight,
    #[error("session is closed")]
    SessionClosed,
    #[error("{0}")]
    BadRequest(String),
    #[error("winner and loser must be different rounds")]
    SameRound,
    #[error("round {0} has no denoising trajectory")]
    MissingTrajectory(u32),
    #[error("{0}")]
    ToolUnavailable(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend configuration: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Training(#[from] DpoError),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn code(&self) -> &'static str {
        match self {
            ApiError::UnknownSchema(_) => "UnknownSchema",
            ApiError::UnknownPersona(_) => "UnknownPersona",
            ApiError::SessionNotFound(_) => "SessionNotFound",
            ApiError::RoundNotFound(_) => "RoundNotFound",
            ApiError::ImageNotFound(_) => "ImageNotFound",
            ApiError::RoundInFlight => "RoundInFlight",
            ApiError::SessionClosed => "SessionClosed",
            ApiError::BadRequest(_) => "BadRequest",
            ApiError::SameRound => "SameRound",
            ApiError::MissingTrajectory(_) => "MissingTrajectory",
            ApiError::ToolUnavailable(_) => "ToolUnavailable",
            ApiError::BackendUnavailable(_) => "BackendUnavailable",
            ApiError::Config(_) => "BackendConfig",
            ApiError::Store(_) => "StoreError",
            ApiError::Training(_) => "TrainingError",
            ApiError::Internal(_) => "Internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::UnknownSchema(_)
            | ApiError::UnknownPersona(_)
            | ApiError::BadRequest(_)
            | ApiError::Config(_) => StatusCode::BAD_REQUEST,
            ApiError::SessionNotFound(_) | ApiError::RoundNotFound(_) | ApiError::ImageNotFound(_) => {
                StatusCode::NOT_FOUND
            }
            ApiError::RoundInFlight | ApiError::SessionClosed => StatusCode::CONFLICT,
            ApiError::SameRound
            | ApiError::MissingTrajectory(_)
            | ApiError::ToolUnavailable(_)
            | ApiError::Training(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::BackendUnavailable(_) => StatusCode::BAD_GATEWAY,
            ApiError::Store(_) | ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::SessionClosed => ApiError::SessionClosed,
            EngineError::EmptyInput | EngineError::InvalidInput(_) => ApiError::BadRequest(e.to_string()),
            EngineError::Backend { .. } | EngineError::IncompleteCaptions(_) => {
                ApiError::BackendUnavailable(e.to_string())
            }
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(json!({ "error": self.code(), "message": self.to_string() }));
        (self.status(), body).into_response()
    }
}
