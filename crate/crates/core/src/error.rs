use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{what} ({value}) is not divisible by {divisor}")]
    Divisibility { what: String, value: usize, divisor: usize },

    #[error("window {window:?} does not fit padded input extents {extents:?}")]
    WindowTooLarge { window: Vec<usize>, extents: Vec<usize> },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("weight file format error: {0}")]
    Format(String),

    #[error("parameter `{name}` has shape {expected:?} in the model but {found:?} in the store")]
    ParamShape { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("strict load failed: {missing} missing and {unexpected} unexpected parameters (first: {first})")]
    StrictLoad { missing: usize, unexpected: usize, first: String },

    #[error("depth transfer rejected: {0}")]
    Transfer(String),

    #[error("training diverged at step {step}: loss_cls={loss_cls} loss_reg={loss_reg}")]
    Divergence { step: usize, loss_cls: f64, loss_reg: f64 },

    #[error("synthetic generation failed: {0}")]
    Generation(String),

    #[error("index {index} out of range for {what} of length {len}")]
    OutOfRange { what: &'static str, index: usize, len: usize },

    #[error("malformed csv {path}: line {line}: {msg}")]
    Csv { path: PathBuf, line: usize, msg: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
