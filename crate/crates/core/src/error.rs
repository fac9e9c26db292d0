use std::path::PathBuf;

use thiserror::Error;

use crate::model::NodeId;

/// Errors raised anywhere in the inference pipeline.
#[derive(Debug, Error)]
pub enum CgmError {
    /// Parameters with incompatible shapes.
    #[error("model error: {0}")]
    Model(String),

    /// A value violates its type invariant (stochasticity, sign, normalization).
    #[error("validation error: {0}")]
    Validation(String),

    #[error("count mismatch: counts sum to {sum}, expected population {population}")]
    CountMismatch { sum: u64, population: u64 },

    /// Graph topology or node/edge references are invalid.
    #[error("structure error: {0}")]
    Structure(String),

    /// An unnormalized message or belief vanished identically.
    #[error("numerical degeneracy at node {node}: {context}")]
    NumericalDegeneracy { node: NodeId, context: String },

    /// An observation demands mass at a state the model gives zero weight.
    #[error("support violation at node {node}, state {state}: observation has mass where the model allows none")]
    SupportViolation { node: NodeId, state: usize },

    #[error("joint tensor with {entries} assignments exceeds the guard of {limit}")]
    Size { entries: u128, limit: u128 },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = CgmError> = std::result::Result<T, E>;
