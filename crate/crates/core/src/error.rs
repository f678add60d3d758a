use std::io;

use crate::tensor::Rank;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid group: {0}")]
    InvalidGroup(String),

    #[error("routing error: rank {rank} is not in a group of size {size}")]
    Routing { rank: Rank, size: usize },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("deadlock: ranks {ranks:?} are blocked with no message in flight")]
    Deadlock { ranks: Vec<Rank> },

    #[error("timed out after {seconds}s waiting for {what}")]
    Timeout { what: String, seconds: f64 },

    #[error("peer {0} closed the connection")]
    PeerClosed(Rank),

    #[error("unsupported operation: {0}")]
    Unsupported(&'static str),

    #[error("invalid buffer handle {0:#x}")]
    InvalidHandle(u64),

    #[error("unknown buffer {0:#x}")]
    UnknownBuffer(u64),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("stalled producer: {0}")]
    StalledProducer(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    /// True for errors caused by the network layer rather than by caller input.
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            Error::Transport(_)
                | Error::Io(_)
                | Error::Deadlock { .. }
                | Error::Timeout { .. }
                | Error::PeerClosed(_)
        )
    }
}
