use thiserror::Error;

/// Errors raised anywhere in the auditing pipeline.
#[derive(Debug, Error)]
pub enum MdfaError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("unbounded divergence: gamma {gamma} must stay below alpha/2 = {limit}")]
    UnboundedDivergence { gamma: f64, limit: f64 },

    #[error("unbounded divergence in sample: cell {cell} has zero weight")]
    UnboundedDivergenceInSample { cell: String },

    #[error("degenerate subgroup: empty cell {0}")]
    DegenerateSubgroup(String),

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("empty certificate support: no weighted mass with c = 1 and Y = {target_y}")]
    EmptyCertificateSupport { target_y: i8 },

    #[error("violated common support: propensity {propensity} at sample {index}")]
    ViolatedCommonSupport { index: usize, propensity: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("zero total weight in group S = {0}")]
    ZeroGroupWeight(i8),

    #[error("certifier diverged after {iterations} iterations (objective trace tail {trace:?})")]
    Divergence { iterations: usize, trace: Vec<f64> },

    #[error("floor too high: first iterate already has alpha_hat = {alpha_hat} <= floor {floor}; try a smaller alpha")]
    FloorTooHigh { alpha_hat: f64, floor: f64 },

    #[error("too many distinct feature vectors for enumeration: {0} (max 12)")]
    TooManyDistinct(usize),

    #[error("all cross-validation folds are degenerate")]
    AllFoldsDegenerate,

    #[error("{failed} of {total} splits failed (more than 20%): first error: {first}")]
    TooManySplitFailures {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("row {row}: unmapped value `{value}` in column `{column}`")]
    UnmappedValue {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}: non-numeric value `{value}` in feature column `{column}`")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("schema: {0}")]
    Schema(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MdfaError>;
