use thiserror::Error;

/// Errors produced by the simulator, the analysis pipeline and the file formats.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A bus, clock or ECU specification violates its invariants.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// A scenario (or an attack applied to it) is inconsistent.
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    /// Input handed to an analysis operation violates its preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Not enough samples to produce an estimate.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A text document could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Trace timestamps are not strictly increasing.
    #[error("ordering error at line {line}: timestamp {timestamp_us} us does not follow {previous_us} us")]
    Ordering {
        line: usize,
        timestamp_us: u64,
        previous_us: u64,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
