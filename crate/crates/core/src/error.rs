use std::path::PathBuf;

/// Errors raised anywhere in the library. Each variant corresponds to one
/// error class; the CLI prints the class as a stable one-line prefix.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("construction error: {0}")]
    Construction(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("parameter error: {0}")]
    Param(String),

    #[error("state error: {0}")]
    State(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error: {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },

    #[error("dimension error: {path}: expected 100x100, found {width}x{height}")]
    Dimension {
        path: PathBuf,
        width: u32,
        height: u32,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("compatibility error: {0}")]
    Compat(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short stable tag for the error class.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Construction(_) => "construction",
            Error::Shape(_) => "shape",
            Error::Param(_) => "parameter",
            Error::State(_) => "state",
            Error::Data(_) => "data",
            Error::Config(_) => "config",
            Error::Ingest { .. } => "ingest",
            Error::Dimension { .. } => "dimension",
            Error::Format(_) => "format",
            Error::Compat(_) => "compat",
            Error::Numeric(_) => "numeric",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
