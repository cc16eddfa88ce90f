//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// `Config` and `Validation` map to CLI exit code 2, everything else to 3.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its documented constraints.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Tensor or image shapes are inconsistent with the operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Input data failed a precondition (bad annotation, missing sign, ...).
    #[error("validation failed: {0}")]
    Validation(String),

    /// A runtime failure such as training divergence.
    #[error("runtime failure: {0}")]
    Runtime(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Validation(_) | Error::Shape(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
