use thiserror::Error;

use crate::pagemem::Tier;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("arithmetic overflow while computing {0}")]
    Overflow(&'static str),

    #[error("usage: {0}")]
    Usage(String),

    #[error("out of memory in {tier:?} tier: requested {requested} bytes, {available} available")]
    OutOfMemory {
        tier: Tier,
        requested: u64,
        available: u64,
    },

    #[error("unknown tensor {0}")]
    UnknownTensor(u64),

    #[error("tensor {0} is already allocated")]
    DuplicateTensor(u64),

    #[error("page move failed: {0}")]
    MoveFailed(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("infeasible schedule at layer {layer}: {reason}")]
    Infeasible { layer: usize, reason: String },

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 1 usage/config, 2 infeasible, 3 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::Infeasible { .. } => 2,
            Error::Simulation(_) | Error::Protocol(_) | Error::Internal(_) => 3,
            _ => 1,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
