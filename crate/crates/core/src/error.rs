use thiserror::Error;

/// Errors produced by graph construction, data-matrix assembly, solvers and the certificate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid weight {value} on {edge}")]
    InvalidWeight { edge: String, value: f64 },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("graph is disconnected: {0}")]
    Disconnected(String),

    #[error("variant subgraph disconnected ({0})")]
    VariantSubgraphDisconnected(String),

    #[error("numerically singular reduced system (pivot {pivot:e} at column {column})")]
    SingularReducedSystem { column: usize, pivot: f64 },

    #[error("singular normal equations")]
    SingularNormalEquations,

    #[error("eigenvalue iteration stalled after {iterations} iterations (residual {residual:e})")]
    EigenStalled { iterations: usize, residual: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("simulation failed: {0}")]
    Simulation(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
