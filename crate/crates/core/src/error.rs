use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("domain error in {op}: input {value} at index {index}")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("backward already ran on this tape; reset before calling it again")]
    BackwardTwice,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid measurement: {0}")]
    InvalidMeasurement(String),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("singular innovation covariance (estimated condition number {condition:.3e})")]
    SingularInnovation { condition: f64 },
    #[error("discretization singular for channel {channel}: 1 - delta*a/2 == 0")]
    SingularDiscretization { channel: usize },
    #[error("out-of-order frame: expected {expected}, got {got}")]
    Sequencing { expected: u64, got: u64 },
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for failures rooted in numerics rather than in input data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::SingularInnovation { .. }
                | Error::SingularDiscretization { .. }
                | Error::Diverged { .. }
        )
    }
}
