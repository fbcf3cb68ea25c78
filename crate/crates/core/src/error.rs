use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input data is well-formed but semantically invalid.
    #[error("data error{}: {message}", location(.path, .line))]
    Data {
        path: Option<PathBuf>,
        line: Option<usize>,
        message: String,
    },

    /// Input data could not be parsed.
    #[error("format error{}: {message}", location(.path, .line))]
    Format {
        path: Option<PathBuf>,
        line: Option<usize>,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn location(path: &Option<PathBuf>, line: &Option<usize>) -> String {
    match (path, line) {
        (Some(p), Some(l)) => format!(" at {}:{}", p.display(), l),
        (Some(p), None) => format!(" in {}", p.display()),
        (None, Some(l)) => format!(" at line {l}"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data {
            path: None,
            line: None,
            message: msg.into(),
        }
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format {
            path: None,
            line: None,
            message: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches a file location to data and format errors.
    pub fn at(self, file: impl Into<PathBuf>, lineno: usize) -> Self {
        match self {
            Error::Data { message, .. } => Error::Data {
                path: Some(file.into()),
                line: Some(lineno),
                message,
            },
            Error::Format { message, .. } => Error::Format {
                path: Some(file.into()),
                line: Some(lineno),
                message,
            },
            other => other,
        }
    }
}
