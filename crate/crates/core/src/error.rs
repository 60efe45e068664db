use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Tensor extents disagree with what an operation needs.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A configuration violates its invariants.
    #[error("config error: {0}")]
    Config(String),
    /// A caller broke an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),
    /// A class with zero samples or zero prior where a positive one is required.
    #[error("degenerate class {class}: {reason}")]
    DegenerateClass { class: usize, reason: String },
    /// An iterative solver stopped before reaching its tolerance.
    #[error("no convergence after {iterations} iterations (marginal violation {violation:e})")]
    Convergence { iterations: usize, violation: f64 },
    /// Training produced a non-finite loss.
    #[error("non-finite loss {loss} at step {step} (lr {lr})")]
    NonFinite { step: usize, lr: f64, loss: f64 },
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
