//! Shared error type for synthesis, validation, and simulation.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    /// Shapes do not conform (non-square input, mismatched block sizes, ...).
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A user-supplied parameter is outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Malformed or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A modeling assumption required by the synthesis does not hold.
    #[error("assumption violated: {0}")]
    Assumption(String),

    /// The requested design problem has no solution (uncontrollable pair,
    /// unobservable pair, shared spectra, ...).
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// An iteration failed to converge or a factorization broke down.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An invariant that should hold by construction was violated; this
    /// indicates a bug upstream, not bad input.
    #[error("invariant violated: {0}")]
    Invariant(String),

    /// The integrator produced a non-finite or exploding state.
    #[error("divergence: agent {agent} at t = {t}")]
    Divergence { agent: usize, t: f64 },
}

impl Error {
    /// Prefix the message with a synthesis-stage tag so CLI users can see
    /// which step of the pipeline refused.
    pub fn tagged(self, stage: &str) -> Self {
        match self {
            Error::Dimension(m) => Error::Dimension(format!("[{stage}] {m}")),
            Error::Parameter(m) => Error::Parameter(format!("[{stage}] {m}")),
            Error::Config(m) => Error::Config(format!("[{stage}] {m}")),
            Error::Assumption(m) => Error::Assumption(format!("[{stage}] {m}")),
            Error::Infeasible(m) => Error::Infeasible(format!("[{stage}] {m}")),
            Error::Numerical(m) => Error::Numerical(format!("[{stage}] {m}")),
            Error::Invariant(m) => Error::Invariant(format!("[{stage}] {m}")),
            e @ Error::Divergence { .. } => e,
        }
    }
}
