use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed annotation JSON at byte {offset}: {message}")]
    AnnotationSyntax { offset: usize, message: String },

    #[error("annotation region {index}: {message}")]
    AnnotationRegion { index: usize, message: String },

    #[error("annotation document: {0}")]
    AnnotationDocument(String),

    #[error(
        "requested area {requested_w_m}x{requested_h_m} m exceeds image extent \
         {available_w_m}x{available_h_m} m"
    )]
    CropExceedsExtent {
        requested_w_m: f64,
        requested_h_m: f64,
        available_w_m: f64,
        available_h_m: f64,
    },

    #[error("dataset split: {0}")]
    Split(String),

    #[error("density map: {0}")]
    Density(String),

    #[error("augment op `{op}`: {message}")]
    Augment { op: &'static str, message: String },

    #[error("ranked pairs: {0}")]
    Pairs(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),

    #[error("checkpoint {path}: {kind}")]
    Checkpoint { path: PathBuf, kind: CheckpointError },

    #[error("loss: {0}")]
    Loss(String),

    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: u32, step: u64 },

    #[error("metric: {0}")]
    Metric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("incompatible format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("config hash mismatch: file {found:016x}, expected {expected:016x}")]
    ConfigMismatch { found: u64, expected: u64 },
    #[error("checksum mismatch in {0}")]
    Checksum(String),
    #[error("truncated file")]
    Truncated,
    #[error("malformed record: {0}")]
    Malformed(String),
}

impl Error {
    /// Short tag of the module that raised the error, used in CLI messages.
    pub fn module(&self) -> &'static str {
        match self {
            Error::AnnotationSyntax { .. }
            | Error::AnnotationRegion { .. }
            | Error::AnnotationDocument(_)
            | Error::CropExceedsExtent { .. }
            | Error::Split(_)
            | Error::Image { .. } => "imagedata",
            Error::Density(_) => "densitymap",
            Error::Augment { .. } => "augment",
            Error::Pairs(_) => "rankpairs",
            Error::Shape { .. } | Error::NonFiniteGradient(_) | Error::Checkpoint { .. } => {
                "network"
            }
            Error::Loss(_) => "losses",
            Error::Diverged { .. } => "trainer",
            Error::Metric(_) => "evaluation",
            Error::Config(_) => "config",
            Error::Io { .. } | Error::Json { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }
}
