//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the selection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or out-of-range request.
    #[error("configuration error: {0}")]
    Config(String),

    /// Task generator asked for an unsupported task kind.
    #[error("unknown task kind: {0}")]
    UnknownTask(String),

    /// A transition was requested past the episode horizon.
    #[error("horizon overflow: state length {len} reached limit {limit}")]
    HorizonOverflow { len: usize, limit: usize },

    /// Vector lengths disagree.
    #[error("shape mismatch: expected length {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Training produced a non-finite objective or gradient.
    #[error("training diverged at step {step}: {what}")]
    TrainingDiverged { step: usize, what: String },

    /// A binary artifact did not start with the expected magic bytes.
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    /// A binary artifact used an unsupported format version.
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u16, found: u16 },

    /// A binary artifact header failed validation.
    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    /// Record data ended early; `offset` is the byte position where the
    /// file stopped short.
    #[error("truncated record data at byte offset {offset}")]
    TruncatedRecord { offset: u64 },

    /// The header's declared counts disagree with the file contents.
    #[error("header inconsistency: {0}")]
    HeaderMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// A pipeline stage failed; carries the stage name for diagnostics.
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Attach a pipeline stage name to an error.
    pub fn in_stage(self, stage: &str) -> Error {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    /// Process exit code: 2 for configuration errors, 3 for stage/runtime
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnknownTask(_) | Error::Domain(_) => 2,
            Error::Stage { source, .. } => {
                // A config error surfaced inside a stage is still a
                // stage failure from the operator's point of view.
                let _ = source;
                3
            }
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::UnknownTask("x".into()).exit_code(), 2);
        assert_eq!(
            Error::TrainingDiverged {
                step: 3,
                what: "nan".into()
            }
            .exit_code(),
            3
        );
        assert_eq!(
            Error::Config("x".into()).in_stage("warmup").exit_code(),
            3
        );
    }
}
