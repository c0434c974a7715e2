use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("missing constant {0}")]
    MissingConstant(&'static str),
    #[error("problem does not provide {0}")]
    MissingAnalytic(&'static str),
    #[error("{0}")]
    NotConverged(String),
    #[error("point is outside the differentiable interior regime: {0}")]
    BoundaryRegime(String),
    #[error("run aborted at round {round}: {reason}")]
    Aborted { round: usize, reason: String },
    #[error("invalid routing instance: {0}")]
    InvalidInstance(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
