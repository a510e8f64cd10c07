//! Service-level error type shared by the registry and the broker.
//!
//! Every variant maps to one HTTP status so that the REST servers and the
//! HTTP clients agree on the failure class without string matching.

use serde::{Deserialize, Serialize};

use crate::bag::ValidationReport;
use crate::metadata::Violation;

pub type Result<T, E = FabricError> = std::result::Result<T, E>;

#[derive(Debug, Clone, thiserror::Error)]
pub enum FabricError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("gone: {0}")]
    Gone(String),
    #[error("validation failed: {message}")]
    Validation {
        message: String,
        violations: Vec<Violation>,
        bag_report: Option<ValidationReport>,
    },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("unavailable: {0}")]
    Unavailable(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl FabricError {
    pub fn validation(message: impl Into<String>) -> Self {
        FabricError::Validation { message: message.into(), violations: Vec::new(), bag_report: None }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            FabricError::NotFound(_) => ErrorKind::NotFound,
            FabricError::Conflict(_) => ErrorKind::Conflict,
            FabricError::Gone(_) => ErrorKind::Gone,
            FabricError::Validation { .. } => ErrorKind::Validation,
            FabricError::Integrity(_) => ErrorKind::Integrity,
            FabricError::Forbidden(_) => ErrorKind::Forbidden,
            FabricError::Unavailable(_) => ErrorKind::Unavailable,
            FabricError::Io(_) => ErrorKind::Io,
            FabricError::Transport(_) => ErrorKind::Transport,
            FabricError::Internal(_) => ErrorKind::Internal,
        }
    }

    pub fn http_status(&self) -> u16 {
        match self.kind() {
            ErrorKind::NotFound => 404,
            ErrorKind::Conflict => 409,
            ErrorKind::Gone => 410,
            ErrorKind::Validation | ErrorKind::Integrity => 422,
            ErrorKind::Forbidden => 403,
            ErrorKind::Unavailable => 503,
            ErrorKind::Io | ErrorKind::Transport | ErrorKind::Internal => 500,
        }
    }

    pub fn to_body(&self) -> ErrorBody {
        let (message, violations, bag_report) = match self {
            FabricError::Validation { message, violations, bag_report } => {
                (message.clone(), violations.clone(), bag_report.clone())
            }
            FabricError::NotFound(m)
            | FabricError::Conflict(m)
            | FabricError::Gone(m)
            | FabricError::Integrity(m)
            | FabricError::Forbidden(m)
            | FabricError::Unavailable(m)
            | FabricError::Io(m)
            | FabricError::Transport(m)
            | FabricError::Internal(m) => (m.clone(), Vec::new(), None),
        };
        ErrorBody { error: self.kind(), message, violations, bag_report }
    }

    pub fn from_body(body: ErrorBody) -> Self {
        let m = body.message;
        match body.error {
            ErrorKind::NotFound => FabricError::NotFound(m),
            ErrorKind::Conflict => FabricError::Conflict(m),
            ErrorKind::Gone => FabricError::Gone(m),
            ErrorKind::Validation => FabricError::Validation {
                message: m,
                violations: body.violations,
                bag_report: body.bag_report,
            },
            ErrorKind::Integrity => FabricError::Integrity(m),
            ErrorKind::Forbidden => FabricError::Forbidden(m),
            ErrorKind::Unavailable => FabricError::Unavailable(m),
            ErrorKind::Io => FabricError::Io(m),
            ErrorKind::Transport => FabricError::Transport(m),
            ErrorKind::Internal => FabricError::Internal(m),
        }
    }
}

impl From<std::io::Error> for FabricError {
    fn from(e: std::io::Error) -> Self {
        FabricError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    NotFound,
    Conflict,
    Gone,
    Validation,
    Integrity,
    Forbidden,
    Unavailable,
    Io,
    Transport,
    Internal,
}

/// JSON body of every non-2xx REST response.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorKind,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<Violation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bag_report: Option<ValidationReport>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn body_round_trip_preserves_kind() {
        let errs = [
            FabricError::NotFound("x".into()),
            FabricError::Gone("x".into()),
            FabricError::Conflict("x".into()),
            FabricError::validation("bad shape"),
            FabricError::Integrity("digest".into()),
        ];
        for e in errs {
            let json = serde_json::to_string(&e.to_body()).unwrap();
            let back = FabricError::from_body(serde_json::from_str(&json).unwrap());
            assert_eq!(back.kind(), e.kind());
            assert_eq!(back.http_status(), e.http_status());
        }
    }

    #[test]
    fn status_mapping() {
        assert_eq!(FabricError::NotFound(String::new()).http_status(), 404);
        assert_eq!(FabricError::Conflict(String::new()).http_status(), 409);
        assert_eq!(FabricError::Gone(String::new()).http_status(), 410);
        assert_eq!(FabricError::validation("").http_status(), 422);
    }
}
