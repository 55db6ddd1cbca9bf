use std::path::PathBuf;

use thiserror::Error;

use crate::linalg::LinalgError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed checkpoint{} at byte {offset}{}: {message}",
        path.as_ref().map(|p| format!(" {}", p.display())).unwrap_or_default(),
        tensor.as_ref().map(|t| format!(" (tensor `{t}`)")).unwrap_or_default())]
    Format {
        path: Option<PathBuf>,
        tensor: Option<String>,
        offset: u64,
        message: String,
    },

    #[error("tensor `{tensor}`: non-finite value {value} at element {index}")]
    NonFinite {
        tensor: String,
        index: usize,
        value: f64,
    },

    #[error("tensor `{tensor}`: shape {got:?} does not match {expected:?} ({what})")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        got: Vec<usize>,
        what: String,
    },

    #[error("tensor `{tensor}` is missing from {source_label}")]
    MissingTensor { tensor: String, source_label: String },

    #[error("layer `{layer}`: {source}")]
    Linalg {
        layer: String,
        #[source]
        source: LinalgError,
    },

    #[error("layer `{layer}`: {message}")]
    Numerical { layer: String, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(tensor: Option<&str>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            path: None,
            tensor: tensor.map(str::to_owned),
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn with_path(self, p: impl Into<PathBuf>) -> Self {
        match self {
            Error::Format {
                tensor,
                offset,
                message,
                ..
            } => Error::Format {
                path: Some(p.into()),
                tensor,
                offset,
                message,
            },
            other => other,
        }
    }

    pub(crate) fn linalg(layer: &str, source: LinalgError) -> Self {
        Error::Linalg {
            layer: layer.to_owned(),
            source,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } | Error::Json(_) => "format",
            Error::ShapeMismatch { .. } | Error::MissingTensor { .. } => "alignment",
            Error::NonFinite { .. } | Error::Linalg { .. } | Error::Numerical { .. } => {
                "numerical"
            }
            Error::Config(_) => "config",
        }
    }

    /// CLI exit status: 1 numerical, 2 usage/config, 3 I/O or format.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "numerical" => 1,
            "config" => 2,
            _ => 3,
        }
    }
}
