use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("empty assignment pool")]
    EmptyPool,

    #[error("capacity exceeded: {what} = {value} exceeds the cap of {cap}")]
    Capacity {
        what: &'static str,
        value: usize,
        cap: usize,
    },

    #[error("singular design: covariate columns {columns:?} are (nearly) linearly dependent (reciprocal condition number {rcond:.3e})")]
    SingularDesign { columns: Vec<usize>, rcond: f64 },

    #[error("invalid gram matrix: {0}")]
    InvalidGram(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("index {index} out of range 1..={len}")]
    Index { index: usize, len: usize },

    #[error("dimension mismatch: expected {expected}, found {found} ({context})")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        context: &'static str,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),

    #[error("collinear design: the assignment lies (numerically) in the covariate column space (n - w'Pw = {gap:.3e})")]
    CollinearDesign { gap: f64 },

    #[error("design mismatch: {0}")]
    DesignMismatch(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("criterion evaluation failed at prefix s = {s}: {source}")]
    Criterion {
        s: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("no hypothesized effect on the grid is retained (boundary p-values: lower {lower_p:.4}, upper {upper_p:.4})")]
    GridExcludesRetained { lower_p: f64, upper_p: f64 },

    #[error("{path}: row {row}, column {column}: {message}")]
    Table {
        path: PathBuf,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },

    #[error("schema version mismatch: artifact has version {found}, this build reads version {expected}")]
    Schema { expected: u32, found: u32 },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the command-line surface: 2 for invalid input or
    /// artifacts, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::SingularDesign { .. }
            | Error::DegenerateDistribution(_)
            | Error::CollinearDesign { .. }
            | Error::InvalidGram(_)
            | Error::GridExcludesRetained { .. } => 3,
            Error::Criterion { source, .. } => source.exit_code(),
            _ => 2,
        }
    }

    pub(crate) fn at_prefix(self, s: usize) -> Error {
        match self {
            e @ Error::Criterion { .. } => e,
            e => Error::Criterion {
                s,
                source: Box::new(e),
            },
        }
    }
}
