use std::io;

use thiserror::Error;

use crate::collectives::CollectiveError;
use crate::hostspec::HostSpecError;
use crate::transport::TransportError;

/// Errors surfaced by the command implementations.
#[derive(Debug, Error)]
pub enum PtError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Hosts(#[from] HostSpecError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Collective(#[from] CollectiveError),
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("protocol: {0}")]
    Protocol(String),
}

impl PtError {
    pub fn usage(msg: impl Into<String>) -> Self {
        PtError::Usage(msg.into())
    }

    /// Exit status for this error: 2 for usage problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PtError::Usage(_) | PtError::Hosts(_) => 2,
            PtError::Collective(CollectiveError::Domain(_)) => 2,
            _ => 1,
        }
    }
}

impl From<bincode::Error> for PtError {
    fn from(e: bincode::Error) -> Self {
        PtError::Protocol(e.to_string())
    }
}

/// Encodes a message exchanged between ranks.
pub(crate) fn encode<T: serde::Serialize>(v: &T) -> Vec<u8> {
    bincode::serialize(v).expect("in-memory serialization")
}

pub(crate) fn decode<T: serde::de::DeserializeOwned>(b: &[u8]) -> Result<T, PtError> {
    Ok(bincode::deserialize(b)?)
}
