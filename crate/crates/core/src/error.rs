use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("degenerate row {row} in {op}: every entry is masked")]
    DegenerateRow { op: &'static str, row: usize },

    #[error("tape state error: {0}")]
    TapeState(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("registration error: {0}")]
    Registration(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numerical abort: {reason} (diagnostics written to {})", diagnostics.display())]
    NumericalAbort { reason: String, diagnostics: PathBuf },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit status for the command-line harness.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnknownKey(_) | Error::Parameter(_) | Error::Registration(_) => 2,
            Error::Compatibility(_) | Error::Protocol(_) | Error::Checkpoint(_) => 3,
            Error::NumericalAbort { .. } | Error::NonFinite { .. } => 4,
            _ => 1,
        }
    }
}
