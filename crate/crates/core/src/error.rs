use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("perturbed label set is empty; cannot build a candidate pool")]
    EmptyPerturbedSet,

    #[error("rule text is empty")]
    EmptyRuleText,

    #[error("duplicate rule: {0:?}")]
    DuplicateRule(String),

    #[error("invalid rulebase parameters: {0}")]
    InvalidParams(String),

    #[error("unsupported schema tag {found:?} (expected {expected:?})")]
    SchemaVersionMismatch { expected: String, found: String },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch { left: (usize, usize), right: (usize, usize) },

    #[error("bad thresholds: epsilon {epsilon} must be below alpha {alpha}")]
    BadThresholds { epsilon: f64, alpha: f64 },

    #[error("zero-norm vector")]
    ZeroVector,

    #[error("non-finite embedding component")]
    NonFinite,

    #[error("candidate pool is empty")]
    EmptyPool,

    #[error("calibration needs at least {needed} scores and a pass rate in (0,1), got {got} scores")]
    InsufficientCalibrationData { needed: usize, got: usize },

    #[error("bad parameters: {0}")]
    BadParams(String),

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("malformed backend response: {0}")]
    MalformedResponse(String),

    #[error("backend returned an empty caption")]
    EmptyCaption,

    #[error("could not extract any rule from the generalizer response")]
    UnparseableResponse,

    #[error("unknown feedback item {0}")]
    UnknownItem(u64),

    #[error("feedback item {0} was already decided")]
    AlreadyDecided(u64),

    #[error("stale rulebase version: expected {expected}, current {current}")]
    StaleVersion { expected: u64, current: u64 },

    #[error("AUC needs both classes present")]
    SingleClass,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("target ratio {target} is not reachable by duplicating normals (current {current})")]
    RatioNotReducible { target: f64, current: f64 },

    #[error("unknown scene {0:?}")]
    UnknownScene(String),

    #[error("unknown frame {0:?}")]
    UnknownFrame(String),

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("corrupt store: {0}")]
    StoreCorrupt(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Transport-level failures are the only ones worth retrying.
    pub fn is_transient(&self) -> bool {
        matches!(self, Error::BackendUnavailable(_))
    }
}
