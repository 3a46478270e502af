use std::path::{Path, PathBuf};

use datasafe::error::ErrorKind;
use datasafe::protocol::ProtocolError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(ProtocolError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("usage: {0}")]
    Usage(String),
}

impl CliError {
    pub fn core(e: impl Into<ProtocolError>) -> Self {
        Self::Core(e.into())
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Core(e) => e.kind(),
            Self::Io { .. } => "cli.Io",
            Self::Config(_) => "cli.Config",
            Self::Usage(_) => "cli.Usage",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Core(e) => e.exit_code(),
            Self::Usage(_) => 2,
            Self::Io { .. } => 3,
            Self::Config(_) => 4,
        }
    }

    /// One JSON object for the diagnostic stream.
    pub fn record(&self) -> serde_json::Value {
        serde_json::json!({
            "error": self.kind(),
            "code": self.exit_code(),
            "message": self.to_string(),
        })
    }
}

macro_rules! from_core {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::Core(e.into())
            }
        }
    )*};
}

from_core!(
    ProtocolError,
    datasafe::crypto::CryptoError,
    datasafe::puf::PufError,
    datasafe::watermark::WatermarkError,
    datasafe::ledger::LedgerError
);
