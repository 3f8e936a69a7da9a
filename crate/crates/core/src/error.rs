//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by data handling, fitting, and estimation.
#[derive(Debug, Error)]
pub enum Error {
    // --- data / CSV ---
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing mandatory column '{0}'")]
    MissingColumn(String),
    #[error("non-numeric cell '{value}' in numeric column '{column}' (row {row})")]
    NonNumeric {
        column: String,
        row: usize,
        value: String,
    },
    #[error("invalid trial indicator {value} at row {row}: s must be 0 or 1")]
    InvalidTrialIndicator { row: usize, value: String },
    #[error("invalid treatment {value} at row {row}")]
    InvalidTreatment { row: usize, value: String },
    #[error("z required in source trial (missing at row {row})")]
    ZRequiredInSource { row: usize },
    #[error("{0} required in source trial (missing at row {1})")]
    RequiredInSource(&'static str, usize),
    #[error("target trial empty: no rows with s = 0")]
    TargetTrialEmpty,
    #[error("source trial empty: no rows with s = 1")]
    SourceTrialEmpty,
    #[error("treated-arm propensity must lie strictly in (0, 1), got {0}")]
    InvalidPropensity(f64),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("column count mismatch: expected {expected}, got {got}")]
    ColumnCountMismatch { expected: usize, got: usize },
    #[error("z requested for a row lacking z (row {row})")]
    ZMissingForBasis { row: usize },

    // --- regression / numerics ---
    #[error("rank-deficient design at lambda = 0; offending columns: {columns:?}")]
    RankDeficient { columns: Vec<usize> },
    #[error("class absent: logistic response is constant")]
    ClassAbsent,
    #[error("logistic fit did not converge: {reason}")]
    LogisticNonConvergence { reason: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("cross-validation failed: no lambda in the grid converged on any fold")]
    CvAllFoldsFailed,
    #[error("empty grid supplied to cross-validation")]
    CvEmptyGrid,

    // --- bridge fitting / estimation ---
    #[error("moment system is rank deficient without ridge regularization")]
    MomentRankDeficient,
    #[error(
        "bridge fit did not converge: gradient max-norm {grad_norm:.3e} after {iterations} iterations"
    )]
    BridgeNonConvergence { grad_norm: f64, iterations: usize },
    #[error("nonpositive dropout probability encountered (min {0:.3e})")]
    NonPositivePi(f64),
    #[error("no target rows: alpha-hat is zero")]
    NoTargetRows,
    #[error("no source rows")]
    NoSourceRows,
    #[error("empty arm: no rows with a = {arm} in the requested trial")]
    EmptyArm { arm: i8 },
    #[error("singular M matrix in parametric standard error (condition number {0:.3e})")]
    SingularM(f64),

    // --- simulation ---
    #[error("invalid experiment id {0}: must lie in 1..=19")]
    InvalidExperimentId(u32),
    #[error("bridge not uniquely identified by closed form: {0} is not square invertible")]
    NoClosedFormBridge(&'static str),
    #[error("monte carlo truth requires at least 1e6 draws, got {0}")]
    TruthTooFewDraws(usize),
    #[error("sample size too small: n = {0} < 50")]
    SampleTooSmall(usize),
    #[error("zero converged replications for estimator '{0}'")]
    ZeroConverged(String),

    #[error("{0}")]
    Config(String),
}
