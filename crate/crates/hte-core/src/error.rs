use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors are grouped by what the caller can do about them: fix the request
/// (`Config`), fix the data (`Schema`/`Parse`/`Invalid`), or accept that the
/// numbers do not support the computation (the rest).
#[derive(Debug, Error)]
pub enum Error {
    /// The request itself is inconsistent (bad flag value, k out of range, ...).
    #[error("config error: {0}")]
    Config(String),

    /// The input file does not have the promised shape.
    #[error("schema error: {0}")]
    Schema(String),

    /// A cell failed to parse as a finite real.
    #[error("parse error at row {row}, column '{column}': {detail}")]
    Parse {
        row: usize,
        column: String,
        detail: String,
    },

    /// Structurally valid data violating a dataset invariant (non-finite
    /// entries, mismatched lengths, ...).
    #[error("invalid data: {0}")]
    Invalid(String),

    /// A moment matrix was too ill-conditioned to invert.
    #[error("rank deficiency in {matrix}: condition number {cond:.3e} exceeds 1e12")]
    RankDeficient { matrix: String, cond: f64 },

    /// Degenerate sample: zero variance, weight-density underflow, or a
    /// bootstrap with too many failed replicates.
    #[error("degenerate data: {0}")]
    Degenerate(String),

    /// A dense solve failed or produced non-finite values.
    #[error("numerical failure in {context} (condition estimate {cond:.3e})")]
    Numerical { context: String, cond: f64 },

    /// Every cross-validation criterion value was non-finite.
    #[error("cross-validation failure: {0}")]
    CvFailure(String),

    /// The discrete system is singular (instrument carries no information).
    #[error("identification failure: {0}")]
    Identification(String),

    /// An analytical oracle check missed its target.
    #[error("oracle failure: {0}")]
    OracleFailure(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
