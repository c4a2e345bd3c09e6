use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum BsdeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cannot allocate {0}")]
    Resource(String),

    #[error("unknown problem `{0}`")]
    UnknownProblem(String),

    #[error("problem `{problem}` requires parameter `{param}`")]
    MissingParam { problem: String, param: String },

    #[error("unsupported for this problem: {0}")]
    UnsupportedProblem(String),

    #[error("generator is not linear in (y, z)")]
    GeneratorNotLinear,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unsupported functional: {0}")]
    UnsupportedFunctional(String),

    #[error("precondition violated: {0}")]
    PreconditionViolated(String),

    #[error("Picard iteration diverged on interval {interval}: residual {residual:e} after {iters} iterations")]
    PicardDiverged {
        interval: usize,
        residual: f64,
        iters: usize,
    },

    #[error("problem has no reference solution")]
    NoReference,

    #[error("rate fit needs at least 3 levels with positive error, got {0}")]
    TooFewLevels(usize),
}

pub type Result<T> = std::result::Result<T, BsdeError>;
