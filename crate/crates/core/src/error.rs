use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Everything that can go wrong in a model evaluation.
///
/// Instability is reported as a value carrying the offending utilization so
/// that sweeps can skip the point and keep going.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    InvalidArgument(String),
    /// The queue has no steady state (`rho >= 1`, `lambda * alpha >= 1`, ...).
    Unstable {
        rho: f64,
    },
    /// The impatience blend only holds for a squared coefficient of
    /// variation of the service time inside `[0, 1]`.
    ApproximationDomain {
        scv: f64,
    },
    /// A linear envelope failed to dominate the mean batch time.
    EnvelopeViolation {
        batch_size: u32,
        mean_time: f64,
        envelope: f64,
    },
    NumericalFailure(String),
    /// Every candidate of an optimization sweep was excluded.
    NoFeasiblePoint,
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::NumericalFailure(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Unstable { rho } => write!(f, "queue is unstable (load {rho:.6} >= 1)"),
            Error::ApproximationDomain { scv } => {
                write!(f, "squared coefficient of variation {scv:.6} is outside [0, 1]")
            }
            Error::EnvelopeViolation { batch_size, mean_time, envelope } => {
                write!(f, "linear envelope {envelope:.6} s is below mean batch time {mean_time:.6} s at b={batch_size}")
            }
            Error::NumericalFailure(msg) => write!(f, "numerical failure: {msg}"),
            Error::NoFeasiblePoint => f.write_str("no feasible candidate in the search range"),
        }
    }
}

impl core::error::Error for Error {}
