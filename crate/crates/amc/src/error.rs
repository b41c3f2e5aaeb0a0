//! Crate-wide error type.
//!
//! Variants map onto the CLI exit codes: config/input problems exit 2,
//! an unsatisfiable compression budget exits 3, numeric failures exit 4.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Invalid configuration, arguments, or input files.
    Config(String),
    /// File has a bad magic, version, or is truncated/corrupt.
    Format(String),
    /// Tensor/layer shapes do not line up; `layer` is the first offender.
    ShapeMismatch { layer: usize, detail: String },
    /// The requested reduction cannot be met even at maximum aggression.
    InfeasibleBudget(String),
    /// A non-finite value surfaced where it must not.
    Numeric(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::ShapeMismatch { layer, detail } => {
                write!(f, "shape mismatch at layer {layer}: {detail}")
            }
            Error::InfeasibleBudget(msg) => write!(f, "infeasible budget: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric failure: {msg}"),
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

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 infeasible, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InfeasibleBudget(_) => 3,
            Error::Numeric(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
