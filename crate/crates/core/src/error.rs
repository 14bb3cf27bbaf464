use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("format error in {path} at byte {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("structural error in {layer}: {msg}")]
    Structural { layer: String, msg: String },

    #[error("pruning error: {0}")]
    Pruning(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("numeric error in {layer}: {msg}")]
    Numeric { layer: String, msg: String },

    #[error("report error: {0}")]
    Report(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn structural(layer: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Structural {
            layer: layer.into(),
            msg: msg.into(),
        }
    }

    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Re-attributes a kernel-level structural or numeric error to a named layer.
    pub fn at(self, layer: &str) -> Self {
        match self {
            Error::Structural { layer: inner, msg } => Error::Structural {
                layer: layer.to_string(),
                msg: format!("{inner}: {msg}"),
            },
            Error::Numeric { layer: inner, msg } => Error::Numeric {
                layer: layer.to_string(),
                msg: format!("{inner}: {msg}"),
            },
            other => other,
        }
    }

    /// Process exit code: 1 config, 2 data, 3 numeric/structural.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 1,
            Error::Data(_) | Error::Format { .. } | Error::Io { .. } | Error::Report(_) => 2,
            Error::Structural { .. }
            | Error::Pruning(_)
            | Error::Plan(_)
            | Error::Numeric { .. } => 3,
        }
    }
}
