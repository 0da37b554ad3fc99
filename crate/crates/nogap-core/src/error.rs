//! Error types shared across the crate.

use thiserror::Error;

/// Everything that can go wrong in this crate.
#[derive(Error, Debug)]
pub enum NogapError {
    /// A tensor or matrix had an unexpected shape.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// An argument was outside its valid domain (negative lengthscale, zero grid, ...).
    #[error("invalid argument for {context}: {message}")]
    Domain {
        context: &'static str,
        message: String,
    },

    /// A configuration file or preset was inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numerical routine failed to produce a finite / decomposable result.
    #[error("numerical failure in {context}: {message}")]
    Numeric {
        context: &'static str,
        message: String,
    },

    /// A serialized artifact was malformed or had a checksum mismatch.
    #[error("format error in {context}: {message}")]
    Format {
        context: &'static str,
        message: String,
    },

    /// Two artifacts that must belong together do not (e.g. checkpoint vs dataset).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl NogapError {
    /// Convenience constructor for shape errors.
    pub fn shape(context: &'static str, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        NogapError::Shape {
            context,
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    /// Convenience constructor for domain errors.
    pub fn domain(context: &'static str, message: impl Into<String>) -> Self {
        NogapError::Domain {
            context,
            message: message.into(),
        }
    }

    /// Convenience constructor for numeric errors.
    pub fn numeric(context: &'static str, message: impl Into<String>) -> Self {
        NogapError::Numeric {
            context,
            message: message.into(),
        }
    }

    /// Convenience constructor for format errors.
    pub fn format(context: &'static str, message: impl Into<String>) -> Self {
        NogapError::Format {
            context,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, NogapError>;
