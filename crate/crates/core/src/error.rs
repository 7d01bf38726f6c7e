use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },
    /// Malformed or incompatible binary file (checkpoints).
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {}: {msg}", path.display())]
    Image { path: PathBuf, msg: String },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable category, used by the CLI for one-line failures.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Parse { .. } => "parse",
            Error::Format(_) => "format",
            Error::Io { .. } | Error::Image { .. } => "io",
        }
    }

    /// The message without its category prefix.
    pub fn detail(&self) -> String {
        match self {
            Error::Shape(m) | Error::Config(m) | Error::Contract(m) | Error::Format(m) => m.clone(),
            Error::Parse { row, msg } => format!("row {row}: {msg}"),
            Error::Io { path, source } => format!("{}: {source}", path.display()),
            Error::Image { path, msg } => format!("{}: {msg}", path.display()),
        }
    }
}
