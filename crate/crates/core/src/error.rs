//! Error types shared by every module.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KernelError {
    /// Shapes of two operands (or an operand and a contract) disagree.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// An input violates a documented precondition (gate range, key norm,
    /// configuration bounds, ...).
    #[error("contract violation in {context}: {detail}")]
    ContractViolation {
        context: &'static str,
        detail: String,
    },

    /// A NaN or infinity surfaced in the running state. `location` names the
    /// stream (batch/head/layer) when known, `token` is the step at which the
    /// value was detected, `(row, col)` the offending state entry.
    #[error("non-finite state{location}: token {token}, entry ({row}, {col})")]
    NonFinite {
        location: String,
        token: usize,
        row: usize,
        col: usize,
    },

    /// The requested execution path does not implement this variant.
    #[error("variant {variant} is not supported by {path}")]
    UnsupportedVariant {
        variant: &'static str,
        path: &'static str,
    },

    #[error("i/o error in {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    /// A serialized artifact (dataset, checkpoint) failed validation.
    #[error("format error in {context}: {detail}")]
    Format { context: String, detail: String },
}

impl KernelError {
    pub fn dim(context: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        KernelError::DimensionMismatch {
            context,
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn contract(context: &'static str, detail: impl Into<String>) -> Self {
        KernelError::ContractViolation {
            context,
            detail: detail.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        KernelError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn format(context: impl Into<String>, detail: impl Into<String>) -> Self {
        KernelError::Format {
            context: context.into(),
            detail: detail.into(),
        }
    }

    /// Attach a token index: rewrites the index of a
    /// [`KernelError::NonFinite`], and tags a
    /// [`KernelError::ContractViolation`]'s detail (used when a per-step
    /// check reports a fault and the sequence driver knows the position).
    pub fn at_token(mut self, t: usize) -> Self {
        match &mut self {
            KernelError::NonFinite { token, .. } => *token = t,
            KernelError::ContractViolation { detail, .. } => {
                detail.push_str(&format!(" (at token {t})"));
            }
            _ => {}
        }
        self
    }

    /// Attach a stream label ("batch 3, head 1, layer 0") to a NaN fault.
    pub fn in_stream(mut self, label: impl Into<String>) -> Self {
        if let KernelError::NonFinite { location, .. } = &mut self {
            *location = format!(" in {}", label.into());
        }
        self
    }
}

pub type Result<T> = std::result::Result<T, KernelError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_finite_message_includes_token_and_entry() {
        let e = KernelError::NonFinite {
            location: String::new(),
            token: 0,
            row: 3,
            col: 7,
        }
        .at_token(12)
        .in_stream("batch 0, head 1");
        let msg = e.to_string();
        assert!(msg.contains("token 12"), "{msg}");
        assert!(msg.contains("(3, 7)"), "{msg}");
        assert!(msg.contains("batch 0, head 1"), "{msg}");
    }
}
