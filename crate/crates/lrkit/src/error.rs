//! Exit-code contract and the machine-readable error record.

use std::io;

use lrkit_core::fit::FitError;
use lrkit_core::ingest::IngestError;
use lrkit_core::lawfit::LawError;
use lrkit_core::micro::MicroError;
use lrkit_core::modsearch::SearchError;
use lrkit_core::mutransfer::TransferError;
use serde_json::json;
use thiserror::Error;

use crate::artifact::ArtifactError;
use crate::render::RenderError;
use crate::report::ReportError;
use crate::runs::RunsError;
use crate::shapes::ShapeError;
use crate::units::UnitError;
use crate::workspace::WorkspaceError;

/// A flag combination the argument parser cannot rule out on its own.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Other,
    Usage,
    Input,
    NotFound,
    KindMismatch,
    Numeric,
}

impl ErrorKind {
    pub fn code(self) -> i32 {
        match self {
            ErrorKind::Other => 1,
            ErrorKind::Usage => 2,
            ErrorKind::Input => 3,
            ErrorKind::NotFound => 4,
            ErrorKind::KindMismatch => 5,
            ErrorKind::Numeric => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::Other => "other",
            ErrorKind::Usage => "usage",
            ErrorKind::Input => "input",
            ErrorKind::NotFound => "not_found",
            ErrorKind::KindMismatch => "kind_mismatch",
            ErrorKind::Numeric => "numeric",
        }
    }
}

fn io_kind(e: &io::Error) -> ErrorKind {
    match e.kind() {
        io::ErrorKind::NotFound => ErrorKind::NotFound,
        io::ErrorKind::InvalidData | io::ErrorKind::InvalidInput => ErrorKind::Input,
        _ => ErrorKind::Other,
    }
}

/// Classifies by the first recognised error in the chain.
pub fn classify(err: &anyhow::Error) -> ErrorKind {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<UnitError>() || cause.is::<clap::Error>() {
            return ErrorKind::Usage;
        }
        if let Some(e) = cause.downcast_ref::<ArtifactError>() {
            return match e {
                ArtifactError::NotFound(_) => ErrorKind::NotFound,
                ArtifactError::KindMismatch { .. } => ErrorKind::KindMismatch,
                ArtifactError::Malformed { .. } => ErrorKind::Input,
                ArtifactError::Io { source, .. } => io_kind(source),
            };
        }
        if let Some(e) = cause.downcast_ref::<RunsError>() {
            return match e {
                RunsError::Io { source, .. } => io_kind(source),
                _ => ErrorKind::Input,
            };
        }
        if let Some(e) = cause.downcast_ref::<WorkspaceError>() {
            return match e {
                WorkspaceError::Io { source, .. } => io_kind(source),
                WorkspaceError::Config { .. } => ErrorKind::Input,
            };
        }
        if let Some(e) = cause.downcast_ref::<ShapeError>() {
            return match e {
                ShapeError::Unknown(..) => ErrorKind::NotFound,
                ShapeError::Malformed { .. } => ErrorKind::Input,
            };
        }
        if cause.is::<RenderError>() || cause.is::<IngestError>() || cause.is::<serde_json::Error>()
        {
            return ErrorKind::Input;
        }
        if let Some(e) = cause.downcast_ref::<ReportError>() {
            return match e {
                ReportError::NoSuchTable(_) => ErrorKind::Usage,
                ReportError::Io { source, .. } => io_kind(source),
                ReportError::Csv(_) => ErrorKind::Other,
            };
        }
        if let Some(MicroError::Config(_)) = cause.downcast_ref::<MicroError>() {
            return ErrorKind::Input;
        }
        if cause.is::<FitError>()
            || cause.is::<LawError>()
            || cause.is::<SearchError>()
            || cause.is::<TransferError>()
            || cause.is::<MicroError>()
        {
            return ErrorKind::Numeric;
        }
        if let Some(e) = cause.downcast_ref::<io::Error>() {
            return io_kind(e);
        }
    }
    ErrorKind::Other
}

/// One-line JSON record written to stderr on failure.
pub fn error_record(kind: ErrorKind, message: &str) -> String {
    json!({"error": {"kind": kind.name(), "message": message, "exit_code": kind.code()}})
        .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    #[test]
    fn codes_follow_the_chain() {
        let e = anyhow::Error::new(ArtifactError::KindMismatch {
            path: PathBuf::new(),
            expected: "a".into(),
            found: "b".into(),
        })
        .context("loading law");
        assert_eq!(classify(&e), ErrorKind::KindMismatch);
        let e = anyhow::Error::new(FitError::BadInput).context("fit-quad");
        assert_eq!(classify(&e).code(), 6);
        assert_eq!(classify(&anyhow::anyhow!("boom")).code(), 1);
        assert_eq!(classify(&UsageError("x".into()).into()).code(), 2);
    }

    #[test]
    fn record_is_json() {
        let v: serde_json::Value =
            serde_json::from_str(&error_record(ErrorKind::NotFound, "gone \"x\"")).unwrap();
        assert_eq!(v["error"]["exit_code"], 4);
        assert_eq!(v["error"]["kind"], "not_found");
        assert_eq!(v["error"]["message"], "gone \"x\"");
    }
}
