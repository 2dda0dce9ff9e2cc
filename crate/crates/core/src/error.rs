use std::path::PathBuf;

use thiserror::Error;

/// A filesystem write or read inside the session directory failed.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("storage failure at {}: {cause}", path.display())]
pub struct StorageFailure {
    pub path: PathBuf,
    pub cause: String,
}

impl StorageFailure {
    pub fn new(path: impl Into<PathBuf>, cause: impl ToString) -> Self {
        Self {
            path: path.into(),
            cause: cause.to_string(),
        }
    }
}
