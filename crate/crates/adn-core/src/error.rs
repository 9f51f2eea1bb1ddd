use thiserror::Error;

/// Errors produced by network construction, evaluation and data handling.
#[derive(Error, Debug)]
pub enum AdnError {
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("internal invariant violated: {0}")]
    InternalInvariant(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid match threshold {t}: tanh soft-logic requires t < tanh(1)")]
    InvalidThreshold { t: f64 },

    #[error("children not matching: sum of child activations {sum} <= n*t = {floor}")]
    ChildrenNotMatching { sum: f64, floor: f64 },

    #[error("random feature initialization failed to reach match threshold in {0} steps")]
    InitFailure(usize),

    #[error("dataset load error at row {row}: {msg}")]
    Load { row: usize, msg: String },

    #[error("injection error: source attribute {0} has no mapping")]
    UnmappedAttribute(usize),

    #[error("empty population")]
    EmptyPopulation,

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, AdnError>;
