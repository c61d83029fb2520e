use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("insufficient calibration data: need the {k}-th smallest of {m} scores at alpha={alpha}")]
    InsufficientCalibration { k: usize, m: usize, alpha: f64 },

    #[error("order statistic index {k} out of range 1..={n}")]
    OrderStatisticRange { k: usize, n: usize },

    #[error("invalid label {label} for {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("probabilities must sum to 1 within 1e-6 (got {sum})")]
    NotNormalized { sum: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("batch of size {batch} too small for alpha={alpha}")]
    BatchTooSmall { batch: usize, alpha: f64 },

    #[error("empty alpha grid")]
    EmptyGrid,

    #[error("CUT loss requires scores in [0,1]; RAPS scores are not supported")]
    CutUnsupportedScore,

    #[error("tied scores are not supported by {0}")]
    TiedScores(&'static str),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty split: {0}")]
    EmptySplit(&'static str),

    #[error("malformed CSV at line {line}, column {column}: {msg}")]
    CsvData {
        line: usize,
        column: String,
        msg: String,
    },

    #[error("class {class} has {rows} rows, fewer than required for splitting")]
    ClassTooSmall { class: usize, rows: usize },

    #[error("non-finite loss detected at epoch {epoch}")]
    NumericalFailure { epoch: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
