use thiserror::Error;

use crate::data::Arm;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse error at record {record}: {message}")]
    Parse { record: usize, message: String },

    #[error("treatment must be 0/1 (record {record}, got {value:?})")]
    BadTreatment { record: usize, value: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{0} arm is empty")]
    EmptyArm(Arm),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("cannot stratify: {arm} arm has {count} observations but K = {folds}")]
    CannotStratify { arm: Arm, count: usize, folds: usize },

    #[error(
        "ordinary least squares is ill-posed for the {arm} arm ({n} rows, {p} features, {reason}); \
         use a penalized fit (ridge or lasso) instead"
    )]
    OlsIllPosed { arm: Arm, n: usize, p: usize, reason: &'static str },

    #[error("coordinate descent did not converge after {sweeps} sweeps (duality gap {gap:.3e}, KKT residual {kkt:.3e})")]
    NoConvergence { sweeps: usize, gap: f64, kkt: f64 },

    #[error("variance unavailable: {arm} arm has {count} observation(s), need at least 2")]
    TooFewForVariance { arm: Arm, count: usize },

    #[error("fold {fold}: {source}")]
    Fold { fold: usize, #[source] source: Box<Error> },

    #[error("fold {fold}, lambda {lambda:.4e}: {source}")]
    FoldLambda { fold: usize, lambda: f64, #[source] source: Box<Error> },

    #[error("no out-of-bag tree for training row {row}; grow more trees or use a smaller subsample")]
    NoOobTrees { row: usize },

    #[error("fixed-point iteration did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    FixedPoint { iterations: usize, residual: f64 },

    #[error("{failures} of {reps} replications failed for {method}; first failure: {first}")]
    TooManyFailures { method: String, failures: usize, reps: usize, first: String },
}

impl Error {
    pub(crate) fn in_fold(self, fold: usize) -> Error {
        Error::Fold { fold, source: Box::new(self) }
    }

    /// True for errors caused by malformed input rather than numerical failure.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::Csv(_)
                | Error::Parse { .. }
                | Error::BadTreatment { .. }
                | Error::InvalidInput(_)
                | Error::EmptyArm(_)
                | Error::DimensionMismatch { .. }
                | Error::CannotStratify { .. }
        )
    }
}
