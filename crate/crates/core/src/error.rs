use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GazeError>;

#[derive(Debug, Error)]
pub enum GazeError {
    /// An argument outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("{path}: line {line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("missing file(s): {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles(Vec<PathBuf>),

    #[error("no valid eye pair among {candidates} candidate box(es)")]
    DetectionFailure { candidates: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unsupported format version {found} (this build reads up to {supported})")]
    Version { found: u32, supported: u32 },

    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("fingerprint mismatch: {0}")]
    Fingerprint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl GazeError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        GazeError::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GazeError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used in CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            GazeError::Domain(_) => "domain",
            GazeError::Schema { .. } => "schema",
            GazeError::MissingFiles(_) => "missing_files",
            GazeError::DetectionFailure { .. } => "detection_failure",
            GazeError::Numerical(_) => "numerical",
            GazeError::DimensionMismatch { .. } => "dimension_mismatch",
            GazeError::Version { .. } => "version",
            GazeError::Checksum { .. } => "checksum",
            GazeError::Format(_) => "format",
            GazeError::Fingerprint(_) => "fingerprint",
            GazeError::Io { .. } => "io",
            GazeError::Image { .. } => "image",
            GazeError::Json(_) => "json",
            GazeError::Csv(_) => "csv",
        }
    }
}
