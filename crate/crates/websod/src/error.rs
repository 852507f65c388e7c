use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): requires x1 < x2 and y1 < y2")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("invalid detection: {0}")]
    InvalidDetection(String),

    #[error("invalid class split: {0}")]
    InvalidSplit(String),

    #[error("annotation error in {file}: {detail}")]
    Annotation { file: String, detail: String },

    #[error("manifest error at line {line}: {detail}")]
    Manifest { line: usize, detail: String },

    #[error("unknown class name {name:?} (field {field}) in {file}")]
    UnknownClass {
        file: String,
        field: String,
        name: String,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {component}")]
    NonFinite { component: String },

    #[error("class index {index} out of range for {count} classes")]
    ClassOutOfRange { index: usize, count: usize },

    #[error("attention pooling requires at least one scored region")]
    EmptyAttention,

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("training diverged: non-finite {component} at step {step}")]
    NanLoss { step: usize, component: String },

    #[error("frozen parameters changed during {context}")]
    FrozenParamsChanged { context: String },

    #[error("stage {stage} requires the {requires} checkpoint at {path}")]
    MissingDependency {
        stage: String,
        requires: String,
        path: PathBuf,
    },

    #[error("checkpoint format error in {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("output directory {path} exists; pass force to overwrite")]
    OutputExists { path: PathBuf },

    #[error("image error on {path}: {detail}")]
    Image { path: PathBuf, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
