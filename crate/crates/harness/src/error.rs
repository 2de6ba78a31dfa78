use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(#[from] supsiam::molgraph::DataError),
    #[error("store integrity check failed for: {}", .0.join(", "))]
    Integrity(Vec<String>),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Runtime(String),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit code: 1 usage/config, 2 data validation, 3 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Data(_) => 2,
            HarnessError::Integrity(_) | HarnessError::Io { .. } | HarnessError::Runtime(_) => 3,
        }
    }
}

impl From<supsiam::trainer::TrainError> for HarnessError {
    fn from(e: supsiam::trainer::TrainError) -> Self {
        match e {
            supsiam::trainer::TrainError::Config(m) => HarnessError::Config(m),
            other => HarnessError::Runtime(other.to_string()),
        }
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::Runtime(format!("csv: {e}"))
    }
}
