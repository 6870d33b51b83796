use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input violates a structural invariant (negative mass, rows not summing to one, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Input is too large for exhaustive enumeration.
    #[error("size error: {0}")]
    Size(String),

    /// A numeric argument is outside the admissible domain of a formula.
    #[error("domain error: {0}")]
    Domain(String),

    /// Shapes of two inputs do not agree.
    #[error("shape error: {0}")]
    Shape(String),

    /// The joint law is not absolutely continuous w.r.t. the product of marginals.
    #[error("absolute continuity violated: {0}")]
    AbsoluteContinuity(String),

    /// A regression fit could not be computed.
    #[error("fit error: {0}")]
    Fit(String),

    /// Unsupported or inconsistent named component in a spec.
    #[error("config error: {0}")]
    Config(String),

    /// A simulation spec is not contractive.
    #[error("contraction violation: {0}")]
    Contraction(String),

    /// A modelling assumption (such as positivity of M) fails.
    #[error("model violation: {0}")]
    Model(String),

    /// Every candidate value of a moment expression was infinite.
    #[error("moment error: {0}")]
    Moment(String),

    /// No reference point fell inside any bandwidth of the grid.
    #[error("bandwidth error: {0}")]
    Bandwidth(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
