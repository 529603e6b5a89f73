use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0} already exists; pass --force to overwrite")]
    Exists(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Model(String),
    #[error("{0}")]
    Audit(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Short tag printed as `error[tag]: ...`.
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Exists(_) => "exists",
            CliError::Data(_) => "data",
            CliError::Model(_) => "model",
            CliError::Audit(_) => "audit",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Io { .. } | CliError::Exists(_) => 4,
            CliError::Data(_) => 5,
            CliError::Model(_) => 6,
            CliError::Audit(_) => 7,
        }
    }
}

macro_rules! from_core {
    ($($t:ty => $variant:ident),* $(,)?) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::$variant(e.to_string())
            }
        })*
    };
}

from_core! {
    bcva_core::trajlog::TrajlogError => Data,
    bcva_core::returns::ReturnsError => Data,
    bcva_core::doorsim::DoorsimError => Data,
    bcva_core::helpgate::GateError => Data,
    bcva_core::net::NetError => Model,
}
