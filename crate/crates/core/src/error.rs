use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("design matrix is rank deficient ({0})")]
    RankDeficient(String),

    #[error("logistic likelihood is unbounded (separation): {0}")]
    Separation(String),

    #[error("no convergence after {iterations} iterations ({context})")]
    NoConvergence { iterations: usize, context: &'static str },

    #[error("design has no support points")]
    EmptyDesign,

    #[error("all design weights fell below the pruning threshold")]
    EmptyAfterPrune,

    #[error("information matrix is singular")]
    SingularInformation,

    #[error("exposure range is degenerate (all values identical)")]
    DegenerateRange,

    #[error("sample is degenerate: {0}")]
    DegenerateSample(String),

    #[error("all importance weights are zero: target mass lies outside the source support")]
    AllZeroWeights,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("schema error at row {row}, column {column:?}: {message}")]
    Schema {
        row: usize,
        column: String,
        message: String,
    },

    #[error("missing value at row {row}, column {column:?}")]
    MissingValue { row: usize, column: String },

    #[error("{failed} of {total} bootstrap replicates failed (limit 10%)")]
    TooManyFailures { failed: usize, total: usize },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// True for errors caused by malformed or invalid input data.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Schema { .. }
                | Error::MissingValue { .. }
                | Error::Io(_)
                | Error::InvalidArgument(_)
                | Error::DimensionMismatch { .. }
                | Error::DegenerateSample(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
