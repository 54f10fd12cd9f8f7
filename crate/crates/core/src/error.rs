use thiserror::Error;

pub type Result<T> = std::result::Result<T, QnnError>;

#[derive(Debug, Error)]
pub enum QnnError {
    #[error("invalid value {0}: input must be finite")]
    InvalidValue(f64),

    #[error("invalid fixed-point format: {0}")]
    InvalidFormat(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("region contains a single point and cannot be split")]
    SingletonRegion,

    #[error("ball of {size} points exceeds enumeration budget {budget}")]
    BudgetExceeded { size: u128, budget: u128 },

    #[error("epsilon balls around {a} and {b} intersect with different labels")]
    GapViolation { a: i64, b: i64 },

    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: String,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated file, needed {needed} bytes at offset {offset} but file has {len}")]
    TruncatedFile {
        path: String,
        offset: usize,
        needed: usize,
        len: usize,
    },

    #[error("{path}: corrupt header: {reason}")]
    CorruptHeader { path: String, reason: String },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl QnnError {
    /// Stable machine-readable identifier, used by the CLI error output.
    pub fn code(&self) -> &'static str {
        match self {
            QnnError::InvalidValue(_) => "invalid_value",
            QnnError::InvalidFormat(_) => "invalid_format",
            QnnError::Shape(_) => "shape_error",
            QnnError::InvalidLabel { .. } => "invalid_label",
            QnnError::UnsupportedArchitecture(_) => "unsupported_architecture",
            QnnError::Numeric(_) => "numeric_error",
            QnnError::SingletonRegion => "singleton_region",
            QnnError::BudgetExceeded { .. } => "budget_exceeded",
            QnnError::GapViolation { .. } => "gap_violation",
            QnnError::BadMagic { .. } => "bad_magic",
            QnnError::TruncatedFile { .. } => "truncated_file",
            QnnError::CorruptHeader { .. } => "corrupt_header",
            QnnError::CountMismatch { .. } => "count_mismatch",
            QnnError::ModelFormat(_) => "model_format",
            QnnError::Config(_) => "config_error",
            QnnError::Io(_) => "io_error",
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        QnnError::Shape(msg.into())
    }
}
