use alloc::string::String;
use core::fmt;

/// Errors surfaced by the numeric core.
///
/// Contract violations (shape mismatches, out-of-range arguments) panic,
/// as is conventional for programmer errors; `CoreError` covers the
/// runtime conditions a caller is expected to handle.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// A non-finite value appeared in the forward pass of the named op.
    NonFiniteForward { op: &'static str },
    /// A non-finite value appeared while backpropagating the named op.
    NonFiniteBackward { op: &'static str },
    /// A model oracle handed the decoder an unusable distribution.
    BadDistribution { detail: String },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::NonFiniteForward { op } => {
                write!(f, "non-finite value in forward pass of op `{op}`")
            }
            CoreError::NonFiniteBackward { op } => {
                write!(f, "non-finite value in backward pass of op `{op}`")
            }
            CoreError::BadDistribution { detail } => {
                write!(f, "bad distribution from model: {detail}")
            }
        }
    }
}

impl core::error::Error for CoreError {}
