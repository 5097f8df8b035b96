use std::fmt;

use confcard_core::dataset::DatasetError;
use confcard_core::evidence::EvidenceError;
use confcard_core::ledger::LedgerError;
use confcard_core::oracle::OracleError;
use confcard_core::protocol::ProtocolError;
use confcard_core::simulate::SimulationError;

/// A failure with a stable, machine-readable category.
#[derive(Debug)]
pub struct CliError {
    pub category: String,
    pub message: String,
}

impl CliError {
    pub fn new(category: &str, message: impl Into<String>) -> Self {
        CliError { category: category.to_string(), message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.category, self.message)
    }
}

macro_rules! categorized {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::new(e.category(), e.to_string())
            }
        }
    )*};
}

categorized!(LedgerError, ProtocolError, EvidenceError, OracleError, DatasetError);

impl From<SimulationError> for CliError {
    fn from(e: SimulationError) -> Self {
        CliError::new("usage", e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new("io", e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::new("io", e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::new("encoding", e.to_string())
    }
}
