use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value {value} {context}")]
    NumericalDomain { value: f64, context: String },

    #[error("covariance is not positive semidefinite: eigenvalue {eigenvalue:e} below floor -{floor:e}")]
    NotPositiveSemidefinite { eigenvalue: f64, floor: f64 },

    #[error("degenerate eigenvalues: modes {i} and {j} are separated by {gap:e} (floor {floor:e})")]
    DegenerateEigenvalue {
        i: usize,
        j: usize,
        gap: f64,
        floor: f64,
    },

    #[error("degenerate covariance: all eigenvalues are zero")]
    DegenerateCovariance,

    #[error("singular mode {mode}: eigenvalue {eigenvalue:e} is not positive")]
    SingularMode { mode: usize, eigenvalue: f64 },

    #[error("sigma = {sigma} at node {node} (x = {x}) is below the lower bound {min}")]
    BoundViolation {
        node: usize,
        x: f64,
        sigma: f64,
        min: f64,
    },

    #[error("evaluation failed on sample {sample}: {source}")]
    SampleFailure {
        sample: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("inference failed: {0}")]
    InferenceFailure(String),

    #[error("infeasible subproblem: {0}")]
    InfeasibleSubproblem(String),

    #[error("objective failed at iterate {iterate:?}: {source}")]
    CallbackFailure {
        iterate: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error("replication with seed {seed} failed: {source}")]
    Replication {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
