use alloc::string::String;

/// Errors raised by the algorithmic core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The CTC target needs more frames than the distribution provides.
    #[error("infeasible CTC target: needs {required} frames, have {frames}")]
    InfeasibleTarget { required: usize, frames: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("{skipped} of {total} tailor pre-training targets were infeasible")]
    TooManyInfeasible { skipped: usize, total: usize },

    #[error("parameter `{0}` not found")]
    MissingParameter(String),
}

pub type Result<T> = core::result::Result<T, Error>;

/// Shorthand for building an [`Error::InvalidArgument`].
pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
