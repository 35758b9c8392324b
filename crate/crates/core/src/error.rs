use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not positive definite (pivot {index} = {pivot:e})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("power iteration did not converge after {iterations} iterations (best estimate {estimate})")]
    NotConverged { iterations: usize, estimate: f64 },

    #[error("matrix is rank deficient at column {column}")]
    RankDeficient { column: usize },

    #[error("dimension {dim} exceeds the dense cap of {cap}")]
    DimensionCap { dim: usize, cap: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("operation requires a {expected} task")]
    TaskMismatch { expected: &'static str },

    #[error("invalid inputs: {0}")]
    InvalidInputs(String),

    #[error("brute-force budget exceeded: {0}")]
    BudgetExceeded(String),

    #[error("curvature is singular: lambda + e_min = {0:e}")]
    SingularCurvature(f64),

    #[error(
        "rejection budget exhausted after {proposals} proposals ({accepted} accepted, acceptance rate {acceptance_rate:e})"
    )]
    ProposalBudgetExceeded {
        proposals: u64,
        accepted: usize,
        acceptance_rate: f64,
    },

    #[error("sampler state violates the ball constraint (|theta - anchor| = {norm} > R = {radius})")]
    InfeasibleState { norm: f64, radius: f64 },

    #[error("empty interval [{lo}, {hi}]")]
    EmptyInterval { lo: f64, hi: f64 },

    #[error("loss diverged at step {step}")]
    DivergedLoss { step: usize },

    #[error("DP-SGD noise calibration is not finite: {0}")]
    BudgetInfeasible(String),

    #[error("bad IDX magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { expected: u32, found: u32 },

    #[error("truncated file: {0}")]
    TruncatedFile(String),

    #[error("image/label count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("insufficient data: requested {requested}, available {available}")]
    InsufficientData { requested: usize, available: usize },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("degenerate level sets: {0}")]
    DegenerateSets(String),

    #[error("projection threshold {threshold} exceeds p = {p}")]
    InfeasibleThreshold { threshold: usize, p: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
