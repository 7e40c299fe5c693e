use std::fmt;
use std::io;

/// Errors raised anywhere in the library.
#[derive(Debug)]
pub enum Error {
    /// Shapes or sizes that do not line up.
    Dimension(String),
    /// An invalid scalar parameter (fan-in, learning rate, ...).
    Parameter(String),
    /// A factor column with zero norm cannot be normalized.
    DegenerateColumn { column: usize },
    /// Index outside `1..=bound` (model indices are 1-based).
    Index { index: usize, bound: usize },
    /// The Tucker rank equation has no real root for these dims.
    BudgetInfeasible(String),
    /// Inputs supplied do not match the modality mask.
    ModalityMismatch(String),
    /// A caller broke an API contract (e.g. backward from a non-scalar).
    Contract(String),
    /// A function under evaluation returned a non-finite value.
    Evaluation(String),
    /// A network or dataset spec is inconsistent.
    Build(String),
    /// Training produced a non-finite loss.
    Divergence { step: usize, loss: f64 },
    /// Checkpoint was written for a different spec.
    IncompatibleCheckpoint(String),
    /// Malformed container or config.
    Format(String),
    Io(io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Error::Parameter(msg) => write!(f, "parameter error: {msg}"),
            Error::DegenerateColumn { column } => {
                write!(f, "degenerate column {column}: zero L2 norm")
            }
            Error::Index { index, bound } => {
                write!(f, "index {index} out of range 1..={bound}")
            }
            Error::BudgetInfeasible(msg) => write!(f, "budget infeasible: {msg}"),
            Error::ModalityMismatch(msg) => write!(f, "modality mismatch: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Evaluation(msg) => write!(f, "evaluation error: {msg}"),
            Error::Build(msg) => write!(f, "build error: {msg}"),
            Error::Divergence { step, loss } => {
                write!(f, "training diverged at step {step}: loss = {loss}")
            }
            Error::IncompatibleCheckpoint(msg) => write!(f, "incompatible checkpoint: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(err: io::Error) -> Self {
        Error::Io(err)
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Format(err.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(err: toml::de::Error) -> Self {
        Error::Format(err.to_string())
    }
}
