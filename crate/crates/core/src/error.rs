use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("protocol order violated: {operation} called while expecting {expected}")]
    ProtocolOrder {
        operation: &'static str,
        expected: &'static str,
    },

    #[error("clustering tree has no published centers")]
    NoCenters,

    #[error("non-finite value produced at node {node} ({op}){detail}")]
    Numeric {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("environment fault at step {step}: {source}")]
    Env { step: usize, source: Box<Error> },

    #[error("round {round} aborted during {stage}: {source}")]
    RoundAborted {
        round: usize,
        stage: &'static str,
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
