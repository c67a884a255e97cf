use thiserror::Error;

/// Errors produced by the casematch library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid transport problem: {0}")]
    InvalidProblem(String),

    #[error("sinkhorn did not converge after {iterations} iterations (marginal violation {violation:e})")]
    NonConvergence { iterations: usize, violation: f64 },

    #[error("solver failed on pair {pair_id}: {source}")]
    PairSolve {
        pair_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch { context: String, expected: usize, actual: usize },

    #[error("missing gold rationale labels for {0}")]
    MissingLabels(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("line {line}: field `{field}`: {message}")]
    Parse { line: usize, field: String, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidProblem(_) => "invalid_problem",
            Error::NonConvergence { .. } => "non_convergence",
            Error::PairSolve { .. } => "pair_solve",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::MissingLabels(_) => "missing_labels",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Parse { .. } => "parse",
            Error::Checkpoint(_) => "checkpoint",
            Error::EmptyInput(_) => "empty_input",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
