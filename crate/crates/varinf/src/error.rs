use thiserror::Error;

/// Errors surfaced by the engine. Exit-code categories used by the CLI:
/// config = 2, solver = 3, io = 4.
#[derive(Debug, Error)]
pub enum Error {
    /// Configuration is invalid. Carries every violation found, not just the first.
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// A marching step failed to converge or produced an inconsistent state.
    #[error("solver failure at step {step} (t = {time}): {message} (residual {residual:e})")]
    Solver {
        step: usize,
        time: f64,
        residual: f64,
        message: String,
    },

    /// Fixed-point iteration exceeded its iteration budget.
    #[error(
        "fixed point did not converge after {iterations} iterations (last residual {residual:e})"
    )]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }

    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    /// CLI exit code category for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 2,
            Error::Solver { .. } | Error::NonConvergence { .. } => 3,
            Error::Io(_) => 4,
        }
    }
}
