use thiserror::Error;

/// Errors produced by the engine.
///
/// Array-file problems get distinct variants so callers can tell a truncated
/// header from an unsupported dtype without parsing messages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("malformed array header: {0}")]
    MalformedHeader(String),

    #[error("unsupported dtype: {0}")]
    UnsupportedDtype(String),

    #[error("unsupported array layout: {0}")]
    UnsupportedLayout(String),

    #[error("rank mismatch: expected {expected}, found rank {found}")]
    Rank { expected: &'static str, found: usize },

    #[error("array payload does not match header: {0}")]
    Payload(String),

    #[error("undefined AUC: {0}")]
    UndefinedAuc(String),

    #[error("undefined error reduction ratio: error rate before deferral is zero")]
    UndefinedErr,

    #[error("degenerate paired t-test: differences have zero variance")]
    DegenerateTest,

    #[error("no candidate threshold reaches Dice >= {floor}; best achievable Dice is {best_dice}")]
    Infeasible { floor: f64, best_dice: f64 },

    #[error("internal consistency violation: {0}")]
    Consistency(String),

    #[error("input too large for reference implementation: {0}")]
    SizeGuard(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// True for errors that mean some data violated a type invariant
    /// (as opposed to bad arguments or unreadable files).
    pub fn is_invariant_violation(&self) -> bool {
        matches!(
            self,
            Error::OutOfRange(_) | Error::NonFinite(_) | Error::Consistency(_)
        )
    }
}
