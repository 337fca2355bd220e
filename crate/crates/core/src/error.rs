use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("no samples supplied")]
    EmptySampleSet,

    #[error("duplicate label `{label}`")]
    DuplicateLabel { label: String },

    #[error("unknown label `{label}`")]
    UnknownLabel { label: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not symmetric at ({row}, {col})")]
    Asymmetric { row: usize, col: usize },

    #[error("diagonal entry for `{label}` is not strictly positive")]
    NonPositiveDiagonal { label: String },

    #[error("diagonal entry for `{label}` is not zero")]
    NonzeroDiagonal { label: String },

    #[error("observed block of sample {sample} is singular")]
    SingularSubmatrix { sample: usize },

    #[error("information matrix is singular")]
    SingularInformation,

    #[error("matrix dimension {n} exceeds the limit of {limit}")]
    DimensionGuardExceeded { n: usize, limit: usize },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("every marker is monomorphic")]
    MonomorphicPanel,

    #[error("marker matrix has missing dosages; impute first")]
    MissingDosages,

    #[error("dosage {value} at ({row}, {col}) is outside [0, {ploidy}]")]
    DosageOutOfRange {
        row: usize,
        col: usize,
        value: f64,
        ploidy: u32,
    },

    #[error("covariance is degenerate: {0}")]
    DegenerateCovariance(String),

    #[error("kernel bandwidth must be positive, got {0}")]
    NegativeBandwidth(f64),

    #[error("genotype `{label}` has records but is not in the relationship matrix")]
    LabelMismatch { label: String },

    #[error("fixed-effect design is rank deficient")]
    DegenerateDesign,

    #[error("row or column `{label}` has no observed entries")]
    EmptyRowOrColumn { label: String },

    #[error("group `{group}` leaves an empty training or test set")]
    EmptyGroup { group: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: u64,
        column: usize,
        message: String,
    },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn parse(line: u64, column: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            column,
            message: message.into(),
        }
    }

    /// True for errors caused by malformed or inconsistent input, as opposed
    /// to numerical failures inside an algorithm.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::SingularSubmatrix { .. }
                | Error::SingularInformation
                | Error::NotPositiveDefinite
                | Error::DegenerateCovariance(_)
                | Error::DegenerateDesign
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
