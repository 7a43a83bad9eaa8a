use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("infeasible calibration: intra-cluster correlation {icc} must be below pair correlation {pair_corr}")]
    InfeasibleCalibration { icc: f64, pair_corr: f64 },

    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: u64, reason: String },

    #[error("line {line}: expected {expected} y values, found {found}")]
    RaggedRow {
        line: u64,
        expected: usize,
        found: usize,
    },

    #[error("duplicate unit: ssu {ssu_id} appears twice in psu {psu_id}")]
    DuplicateUnit { psu_id: i64, ssu_id: i64 },

    #[error("invalid frame: {0}")]
    InvalidFrame(String),

    #[error("empty frame")]
    EmptyFrame,

    #[error("sample size {n} exceeds population size {population}")]
    SampleTooLarge { n: usize, population: usize },

    #[error("size mismatch: expected {expected}, got {got}")]
    SizeMismatch { expected: usize, got: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("{method} is incompatible with this sample: {reason}")]
    IncompatibleMethod { method: String, reason: String },

    #[error("second-stage variance estimates are missing for {0}")]
    MissingVarianceEstimates(String),

    #[error("insufficient replicates: need at least {need}, have {have}")]
    InsufficientReplicates { need: usize, have: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
