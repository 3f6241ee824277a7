use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use hotspot::catalog::CatalogError;
use hotspot::features::FeatureError;
use hotspot::harness::HarnessError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if let ApiError::Internal(msg) = &self {
            log::error!("{msg}");
        }
        (self.status(), Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

impl From<FeatureError> for ApiError {
    fn from(e: FeatureError) -> Self {
        match e {
            FeatureError::InvalidRoi(_) | FeatureError::TooSmall { .. } => ApiError::Unprocessable(e.to_string()),
            FeatureError::Image(_) | FeatureError::InvalidInput(_) => ApiError::BadRequest(e.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl From<CatalogError> for ApiError {
    fn from(e: CatalogError) -> Self {
        match e {
            CatalogError::ImageNotFound(_) => ApiError::NotFound(e.to_string()),
            CatalogError::LabelExists(_) | CatalogError::InvalidLabelName => ApiError::BadRequest(e.to_string()),
            CatalogError::EmptyPool | CatalogError::NoGeneration => ApiError::Conflict(e.to_string()),
            CatalogError::Feature(f) => f.into(),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl From<HarnessError> for ApiError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) | HarnessError::BackendMismatch { .. } | HarnessError::VariantMismatch { .. } => {
                ApiError::BadRequest(e.to_string())
            }
            HarnessError::Feature(f) => f.into(),
            HarnessError::Catalog(c) => c.into(),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl From<tokio::task::JoinError> for ApiError {
    fn from(e: tokio::task::JoinError) -> Self {
        ApiError::Internal(format!("worker failed: {e}"))
    }
}
