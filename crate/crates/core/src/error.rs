use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum GcdError {
    #[error("vector has (near-)zero norm {norm:.3e}; cannot normalize")]
    ZeroVector { norm: f64 },

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("not a probability vector: {reason}")]
    NotAProbabilityVector { reason: String },

    #[error("non-finite value encountered during {context}")]
    NonFiniteEvaluation { context: String },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("could not place {k} class means with pairwise separation {sep} after {attempts} attempts")]
    InfeasibleSeparation { k: usize, sep: f64, attempts: usize },

    #[error("parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },

    #[error("dataset invariant violated: {0}")]
    InvariantViolation(String),

    #[error("k = {k} exceeds the {n}-point neighborhood limit of {max}")]
    KTooLarge { k: usize, n: usize, max: usize },

    #[error("no labeled samples in batch")]
    NoLabeledSamples,

    #[error("batch of size {0} too small for pairwise loss")]
    BatchTooSmall(usize),

    #[error("no class is present in both views")]
    NoCommonClasses,

    #[error("dataset of {have} points too small: batch plan needs {needed}")]
    DatasetTooSmall { needed: usize, have: usize },

    #[error("forward cache does not match the supplied batch or parameters: {0}")]
    CacheMismatch(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite loss at epoch {epoch}, step {step} ({term}); training aborted")]
    DivergenceDetected { epoch: usize, step: usize, term: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GcdError>;
