use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Unified error type for tensor ops, layers, file formats, and run configs.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands disagree on shape; `op` names the failing operation.
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// Construction data length does not match rows * cols.
    DataLength { rows: usize, cols: usize, got: usize },
    /// An operation that needs at least one element got none.
    EmptyInput(&'static str),
    /// An index is outside the valid range; `what` names the indexed thing.
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    /// Task-level gating was requested without a task id.
    MissingTaskId,
    /// Task-level gating was requested but the gate has no task embedding table.
    MissingTaskEmbeddings,
    /// A token-level forward was requested on a layer without a bottleneck block.
    MissingBottleneck,
    /// A forward was routed through the wrong entry point for the layer's gate level.
    WrongLevel {
        expected: &'static str,
        got: &'static str,
    },
    /// A configuration value violates a documented constraint.
    InvalidConfig(String),
    /// Underlying I/O failure, message carries the OS detail.
    Io(String),
    /// An expert-bank file did not match the expected binary layout.
    BankFormat(String),
    /// The JSON run config could not be parsed; message names the offending key.
    Json(String),
    /// A computation produced a non-finite value where a finite one is required.
    NonFinite(&'static str),
    /// Toy training diverged (non-finite loss) at the given epoch.
    Diverged { epoch: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => write!(
                f,
                "{op}: shape mismatch, left is {}x{}, right is {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::DataLength { rows, cols, got } => write!(
                f,
                "matrix data length {got} does not match {rows}x{cols} = {}",
                rows * cols
            ),
            Error::EmptyInput(what) => write!(f, "{what}: empty input"),
            Error::IndexOutOfRange { what, index, len } => {
                write!(f, "{what} index {index} out of range (len {len})")
            }
            Error::MissingTaskId => write!(f, "task-level gating requires a task id"),
            Error::MissingTaskEmbeddings => {
                write!(f, "task-level gating requires a task embedding table")
            }
            Error::MissingBottleneck => {
                write!(f, "token-level forward requires a bottleneck block")
            }
            Error::WrongLevel { expected, got } => {
                write!(f, "forward entry point expects {expected} level, layer is {got}")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
            Error::BankFormat(msg) => write!(f, "expert bank file: {msg}"),
            Error::Json(msg) => write!(f, "config parse: {msg}"),
            Error::NonFinite(what) => write!(f, "{what}: non-finite value"),
            Error::Diverged { epoch } => {
                write!(f, "training diverged, non-finite loss at epoch {epoch}")
            }
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
