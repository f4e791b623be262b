/// Errors shared across the whole pipeline.
///
/// The split mirrors how callers recover: `Domain` and `Capacity` are
/// caller bugs (bad arguments, impossible configurations), `Numeric` means
/// an algorithm left its valid regime at runtime (overflow, divergence,
/// empty class), and `Io`/`Format` cover artifact round-trips.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violated a precondition, e.g. a probability vector that
    /// does not sum to one or mismatched dimensions.
    #[error("domain error: {0}")]
    Domain(String),

    /// KL(p || q) diverged because q assigns zero mass where p does not.
    #[error("infinite KL divergence: p[{index}] = {p} but q[{index}] = 0")]
    InfiniteKl { index: usize, p: f64 },

    /// A joint-distribution KL term diverged: the second distribution has a
    /// support hole at outcome (x, y) where the first carries mass.
    #[error("support violation at (x={x}, y={y}): reference mass {mass} has no counterpart")]
    SupportViolation { x: usize, y: usize, mass: f64 },

    /// A size or count limit was exceeded, e.g. requesting more distinct
    /// items than exist.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// A computation produced NaN/Inf or otherwise failed to converge.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Underlying filesystem failure while reading or writing an artifact.
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),

    /// An artifact file exists but its bytes do not parse as the expected
    /// format (bad magic, version, or truncated payload).
    #[error("malformed artifact: {0}")]
    Format(String),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn capacity(msg: impl Into<String>) -> Self {
        Error::Capacity(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
