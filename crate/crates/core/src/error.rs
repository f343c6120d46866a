use std::path::PathBuf;

use thiserror::Error;

use crate::month::Month;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: row {row}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("duplicate key ({asset}, {date}) at rows {first_row} and {second_row}")]
    DuplicateKey {
        asset: String,
        date: String,
        first_row: usize,
        second_row: usize,
    },

    #[error("market return missing for listed date {0}")]
    MissingMarket(String),

    #[error("predictor {0:?} has no group assignment")]
    UngroupedPredictor(String),

    #[error("unknown predictor group {0:?}")]
    UnknownGroup(String),

    #[error("month {0} has no assets")]
    EmptyMonth(Month),

    #[error("invalid lag {0}: must be positive")]
    InvalidLag(i64),

    #[error("panel is empty after lagging by {0} months")]
    EmptyAfterLag(u32),

    #[error("beta undefined: sum of squared market returns is zero")]
    UndefinedBeta,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("column mismatch: model expects {expected} predictors, got {got}")]
    ColumnMismatch { expected: usize, got: usize },

    #[error("sample span of {span} months is too short; need at least {required}")]
    InsufficientSpan { span: i32, required: i32 },

    #[error("empty training set for iteration {0}")]
    EmptyTrainingSet(usize),

    #[error("all hyperparameter candidates failed to fit")]
    AllCandidatesFailed,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("terminal value undefined for {context}: discount rate {rate} <= growth {growth}")]
    TerminalValue {
        context: String,
        rate: f64,
        growth: f64,
    },

    #[error("portfolio problem infeasible: direction ({a}, {b}) separates the constraint targets from the box image")]
    Infeasible { a: f64, b: f64 },

    #[error("solver failed to converge: {0}")]
    NoConvergence(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("model blob error: {0}")]
    ModelFormat(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}
