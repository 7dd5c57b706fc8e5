use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid grade {0}: grades are 1, 2 or 3")]
    InvalidGrade(i64),

    #[error("invalid agreement count {0}: expected 1, 2 or 3")]
    InvalidAgreementCount(i64),

    #[error("invalid polygon for lesion {lesion_id}: {reason}")]
    InvalidPolygon { lesion_id: String, reason: String },

    #[error("manifest validation failed: {0}")]
    Manifest(String),

    #[error("patient {0} has no lesions")]
    EmptyPatient(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("lesion box lies entirely outside the {width}x{height} region image")]
    BoxOutsideImage { width: usize, height: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("degenerate marginals: kappa undefined")]
    DegenerateMarginals,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("backbone {0} is not available in this build")]
    Capability(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by bad input data or configuration, as
    /// opposed to I/O or runtime failures.
    pub fn is_data_error(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::Divergence { .. } | Error::Csv(_) | Error::Capability(_)
        )
    }
}
