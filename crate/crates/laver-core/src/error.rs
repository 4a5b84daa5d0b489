use thiserror::Error;

/// Errors produced by tensor kernels, layout builders, losses, and the
/// training harness. Invalid caller input is reported as a dedicated
/// variant so tests can match on the exact rejection.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("invalid argument to {op}: {details}")]
    InvalidArgument { op: &'static str, details: String },

    #[error("temperature must be > 0, got {0}")]
    NonPositiveTemperature(f64),

    #[error("row {row} has near-zero norm {norm:e} (min {min:e})")]
    NearZeroRow { row: usize, norm: f64, min: f64 },

    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: usize, total: usize },

    #[error("degenerate kernel matrix: {reason}")]
    DegenerateKernel { reason: String },

    #[error("feature matrix has rank {rank}, need at least {needed}")]
    RankDeficient { rank: usize, needed: usize },

    #[error("non-finite value detected in {op} at layer {layer}")]
    NonFinite { op: &'static str, layer: usize },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("bad file format in {path}: {details}")]
    BadFormat { path: String, details: String },

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            details: details.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, details: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            details: details.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
