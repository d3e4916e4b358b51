use alloc::boxed::Box;
use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid {what}: {detail}")]
    InvalidArgument { what: &'static str, detail: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("timestep {t} outside [1, {horizon}]")]
    TimestepOutOfRange { t: usize, horizon: usize },

    #[error("reward index {index} out of range for a committee of {size}")]
    RewardIndex { index: usize, size: usize },

    #[error("zero reward difference has no oracle direction")]
    ZeroRewardDifference,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("generator gave up after {0} tied redraws")]
    TooManyTies(usize),

    #[error("iteration {iteration}: {source}")]
    Iteration { iteration: usize, source: Box<Error> },

    #[error("{0}")]
    Observer(String),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        match self {
            e @ Error::Iteration { .. } => e,
            e => Error::Iteration {
                iteration,
                source: Box::new(e),
            },
        }
    }

    /// True when the error stems from a non-finite loss or gradient.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite(_) => true,
            Error::Iteration { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}
