use std::path::PathBuf;

use ratchetlab_core::client::ClientError;
use ratchetlab_core::key_store::KeyStoreError;
use ratchetlab_core::metadata::MetadataError;
use ratchetlab_core::server::ServerError;
use ratchetlab_core::sim::SimError;
use ratchetlab_core::verification::VerificationError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Protocol(String),
    #[error("{}: {1}", .0.display())]
    Corrupt(PathBuf, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 1 usage, 2 protocol or integrity, 3 I/O (including unreadable state files).
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Protocol(_) => 2,
            CliError::Corrupt(..) | CliError::Io(_) => 3,
        }
    }
}

impl From<KeyStoreError> for CliError {
    fn from(e: KeyStoreError) -> Self {
        match e {
            KeyStoreError::Io(io) => CliError::Io(io),
            KeyStoreError::Load { .. } => CliError::Corrupt(PathBuf::from("key store"), e.to_string()),
            KeyStoreError::InvalidUserId(_) => CliError::Usage(e.to_string()),
            other => CliError::Protocol(other.to_string()),
        }
    }
}

impl From<ServerError> for CliError {
    fn from(e: ServerError) -> Self {
        match e {
            ServerError::Io(io) => CliError::Io(io),
            ServerError::Key(k) => k.into(),
            ServerError::NotFound(_) | ServerError::UnknownGroup(_) | ServerError::Validation(_) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Protocol(other.to_string()),
        }
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Server(s) => s.into(),
            other => CliError::Protocol(other.to_string()),
        }
    }
}

impl From<MetadataError> for CliError {
    fn from(e: MetadataError) -> Self {
        match e {
            MetadataError::Io(io) => CliError::Io(io),
            MetadataError::Parse { .. } => CliError::Corrupt(PathBuf::from("ledger"), e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Protocol(other.to_string()),
        }
    }
}

impl From<VerificationError> for CliError {
    fn from(e: VerificationError) -> Self {
        CliError::Usage(e.to_string())
    }
}
