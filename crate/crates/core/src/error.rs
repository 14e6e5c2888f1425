use thiserror::Error;

/// Errors produced by the identification pipeline.
#[derive(Debug, Error)]
pub enum DdklError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("{what} is rank deficient: rank {rank}, required {required}")]
    RankDeficient {
        what: String,
        rank: usize,
        required: usize,
    },

    #[error("ill-conditioned {what}: condition number {condition:.3e} exceeds {limit:.1e}; consider merging batches")]
    IllConditioned {
        what: String,
        condition: f64,
        limit: f64,
    },

    #[error("non-finite value in loss term {term} ({name})")]
    NumericalFailure { term: usize, name: &'static str },

    #[error("state diverged at step k = {k}")]
    Divergence { k: usize },

    #[error("insufficient data: need at least {needed} samples, have {available}")]
    InsufficientData { needed: usize, available: usize },

    #[error("graph is not strongly connected: node {to} is unreachable from node {from}")]
    Disconnected { from: usize, to: usize },

    #[error("round skew: agent {agent} is at round {agent_round}, exchange expected round {expected}")]
    RoundSkew {
        agent: usize,
        agent_round: u64,
        expected: u64,
    },

    #[error("missing snapshot from neighbor {neighbor} at agent {agent}")]
    MissingSnapshot { agent: usize, neighbor: usize },

    #[error("residual bound unavailable: {0}")]
    BoundUnavailable(String),

    #[error("agent {agent}, batch {tau}: {cause}")]
    Agent {
        agent: usize,
        tau: usize,
        cause: Box<DdklError>,
    },

    #[error("config error at {field}: {message}")]
    Config { field: String, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DdklError {
    pub(crate) fn dims(context: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        DdklError::DimensionMismatch {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Attaches agent and batch context.
    pub fn at(self, agent: usize, tau: usize) -> Self {
        match self {
            already @ DdklError::Agent { .. } => already,
            other => DdklError::Agent {
                agent,
                tau,
                cause: Box::new(other),
            },
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        DdklError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, DdklError>;
