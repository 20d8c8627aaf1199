//! Error types shared across the crate.

use thiserror::Error;

/// Errors from the numeric and data-handling modules.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("parse error in {file}: {msg}")]
    Parse { file: String, msg: String },
}

/// Errors from running a federated session end to end.
#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Protocol(#[from] crate::protocol::ProtocolError),

    #[error(transparent)]
    Transport(#[from] crate::transport::TransportError),

    #[error("round {round}: timed out waiting for uploads from clients {missing:?}")]
    Barrier { round: u64, missing: Vec<u64> },

    #[error("client {client} uploaded for round {got} during round {expected}")]
    MixedRound {
        client: u64,
        expected: u64,
        got: u64,
    },

    #[error("client id {0} registered twice")]
    DuplicateClient(u64),

    #[error("lost client {client}: {reason}")]
    ClientLost { client: u64, reason: String },

    #[error("unexpected {got} while {context}")]
    UnexpectedMessage {
        context: &'static str,
        got: &'static str,
    },

    #[error("invalid run config: {0}")]
    Config(String),

    #[error("worker thread panicked: {0}")]
    WorkerPanic(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
