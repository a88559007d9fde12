//! Error codes shared by HTTP error bodies and CLI exit statuses.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use precedent_core::adjudication::AdjudicationError;
use precedent_core::evaluation::EvalError;
use precedent_core::graph::GraphError;
use precedent_core::index::IndexError;
use precedent_core::ingestion::IngestError;
use precedent_core::EmbeddingError;

use crate::API_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    InvalidInput,
    UnsupportedVersion,
    NotFound,
    Conflict,
    UnknownAnnotator,
    Provider,
    Unparseable,
    Index,
    Embedding,
    Extraction,
    Config,
    LintFailed,
    Io,
    Internal,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 14] = [
        ErrorCode::InvalidInput,
        ErrorCode::UnsupportedVersion,
        ErrorCode::NotFound,
        ErrorCode::Conflict,
        ErrorCode::UnknownAnnotator,
        ErrorCode::Provider,
        ErrorCode::Unparseable,
        ErrorCode::Index,
        ErrorCode::Embedding,
        ErrorCode::Extraction,
        ErrorCode::Config,
        ErrorCode::LintFailed,
        ErrorCode::Io,
        ErrorCode::Internal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::InvalidInput => "invalid_input",
            ErrorCode::UnsupportedVersion => "unsupported_version",
            ErrorCode::NotFound => "not_found",
            ErrorCode::Conflict => "conflict",
            ErrorCode::UnknownAnnotator => "unknown_annotator",
            ErrorCode::Provider => "provider",
            ErrorCode::Unparseable => "unparseable",
            ErrorCode::Index => "index",
            ErrorCode::Embedding => "embedding",
            ErrorCode::Extraction => "extraction",
            ErrorCode::Config => "config",
            ErrorCode::LintFailed => "lint_failed",
            ErrorCode::Io => "io",
            ErrorCode::Internal => "internal",
        }
    }

    /// Process exit status for the CLI. Values below 10 are left to success,
    /// panics and usage errors.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCode::InvalidInput => 10,
            ErrorCode::UnsupportedVersion => 11,
            ErrorCode::NotFound => 12,
            ErrorCode::Conflict => 13,
            ErrorCode::UnknownAnnotator => 14,
            ErrorCode::Provider => 20,
            ErrorCode::Unparseable => 21,
            ErrorCode::Index => 30,
            ErrorCode::Embedding => 31,
            ErrorCode::Extraction => 32,
            ErrorCode::Config => 40,
            ErrorCode::LintFailed => 41,
            ErrorCode::Io => 50,
            ErrorCode::Internal => 70,
        }
    }

    pub fn http_status(self) -> StatusCode {
        match self {
            ErrorCode::InvalidInput | ErrorCode::UnsupportedVersion => StatusCode::BAD_REQUEST,
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::Conflict => StatusCode::CONFLICT,
            ErrorCode::UnknownAnnotator => StatusCode::FORBIDDEN,
            ErrorCode::Provider => StatusCode::BAD_GATEWAY,
            ErrorCode::Unparseable | ErrorCode::Extraction | ErrorCode::LintFailed => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorCode::Index | ErrorCode::Embedding | ErrorCode::Config | ErrorCode::Io | ErrorCode::Internal => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        }
    }
}

impl std::fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Error)]
#[error("{code}: {message}")]
pub struct ServiceError {
    pub code: ErrorCode,
    pub message: String,
    pub details: Option<Value>,
}

impl ServiceError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ServiceError {
            code,
            message: message.into(),
            details: None,
        }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = Some(details);
        self
    }

    /// Prefixes the message, typically with the path involved.
    pub fn context(mut self, what: impl std::fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::InvalidInput, message)
    }

    pub fn body(&self) -> Value {
        let mut error = json!({"code": self.code, "message": self.message});
        if let Some(d) = &self.details {
            error["details"] = d.clone();
        }
        json!({"api_version": API_VERSION, "error": error})
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.code.http_status(), Json(self.body())).into_response()
    }
}

impl From<std::io::Error> for ServiceError {
    fn from(e: std::io::Error) -> Self {
        Self::new(ErrorCode::Io, e.to_string())
    }
}

impl From<GraphError> for ServiceError {
    fn from(e: GraphError) -> Self {
        let code = match e {
            GraphError::Io(_) => ErrorCode::Io,
            GraphError::DuplicateGraphId(_) => ErrorCode::Conflict,
            _ => ErrorCode::InvalidInput,
        };
        Self::new(code, e.to_string())
    }
}

impl From<EmbeddingError> for ServiceError {
    fn from(e: EmbeddingError) -> Self {
        let code = match e {
            EmbeddingError::Config(_) => ErrorCode::Config,
            EmbeddingError::Provider { .. } => ErrorCode::Provider,
            _ => ErrorCode::Embedding,
        };
        Self::new(code, e.to_string())
    }
}

impl From<IndexError> for ServiceError {
    fn from(e: IndexError) -> Self {
        let code = match e {
            IndexError::Weights(_) | IndexError::ZeroK => ErrorCode::InvalidInput,
            IndexError::Io(_) => ErrorCode::Io,
            _ => ErrorCode::Index,
        };
        Self::new(code, e.to_string())
    }
}

impl From<IngestError> for ServiceError {
    fn from(e: IngestError) -> Self {
        let code = match &e {
            IngestError::InvalidInput(_) => ErrorCode::InvalidInput,
            IngestError::Provider(_) => ErrorCode::Provider,
            IngestError::NormalizationQuality(_) | IngestError::Extraction { .. } => ErrorCode::Extraction,
            IngestError::Embedding { .. } => ErrorCode::Embedding,
            IngestError::DuplicateId(_) => ErrorCode::Conflict,
            IngestError::Config(_) => ErrorCode::Config,
            IngestError::Graph(_) => ErrorCode::InvalidInput,
            IngestError::Io(_) => ErrorCode::Io,
        };
        let details = match &e {
            IngestError::Extraction { raw_output, violations } => {
                Some(json!({"raw_output": raw_output, "violations": violations}))
            }
            _ => None,
        };
        ServiceError {
            code,
            message: e.to_string(),
            details,
        }
    }
}

impl From<AdjudicationError> for ServiceError {
    fn from(e: AdjudicationError) -> Self {
        let code = match &e {
            AdjudicationError::InvalidQuery(_) => ErrorCode::InvalidInput,
            AdjudicationError::MissingIndex(_) => ErrorCode::Config,
            AdjudicationError::QueryGraph(inner) => match inner {
                IngestError::Provider(_) => ErrorCode::Provider,
                IngestError::Embedding { .. } => ErrorCode::Embedding,
                _ => ErrorCode::Extraction,
            },
            AdjudicationError::Index(_) => ErrorCode::Index,
            AdjudicationError::Provider { .. } => ErrorCode::Provider,
            AdjudicationError::Unparseable { .. } => ErrorCode::Unparseable,
        };
        let transcript = e.transcript();
        let details = (!transcript.is_empty()).then(|| json!({"transcript": transcript}));
        ServiceError {
            code,
            message: e.to_string(),
            details,
        }
    }
}

impl From<EvalError> for ServiceError {
    fn from(e: EvalError) -> Self {
        let code = match e {
            EvalError::Io(_) => ErrorCode::Io,
            EvalError::RecordSetMismatch { .. } | EvalError::Insufficient { .. } => ErrorCode::InvalidInput,
            EvalError::DuplicateId { .. } => ErrorCode::Conflict,
            _ => ErrorCode::InvalidInput,
        };
        Self::new(code, e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_distinct_and_stable() {
        let mut names = std::collections::BTreeSet::new();
        let mut exits = std::collections::BTreeSet::new();
        for c in ErrorCode::ALL {
            assert!(names.insert(c.as_str()));
            assert!(exits.insert(c.exit_code()));
            assert!(c.exit_code() > 1);
            assert_eq!(serde_json::to_value(c).unwrap(), json!(c.as_str()));
        }
    }

    #[test]
    fn body_shape() {
        let e = ServiceError::invalid("bad").with_details(json!({"missing": ["STOP"]}));
        assert_eq!(
            e.body(),
            json!({"api_version": "1", "error": {"code": "invalid_input", "message": "bad", "details": {"missing": ["STOP"]}}})
        );
    }
}
