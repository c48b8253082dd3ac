use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("kernel is not integrable: {0}")]
    NonIntegrableKernel(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("integration aborted at t = {time}: {reason}")]
    Integration { time: f64, reason: String },

    #[error("controllability Gramian is singular (rank {rank} of {size})")]
    SingularGramian { rank: usize, size: usize },

    #[error("forward-backward sweep did not converge after {iterations} iterations (last residual {last:e})")]
    NotConverged {
        iterations: usize,
        last: f64,
        history: Vec<f64>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
