//! Error types shared across the toolkit.

use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while loading, saving, or validating checkpoint files.
///
/// Load-time variants carry the absolute byte position in the file where the
/// problem was detected.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("malformed header JSON at byte {offset}: {reason}")]
    MalformedHeader { offset: u64, reason: String },

    #[error("unknown dtype tag {tag:?} for tensor {name:?} at byte {offset}")]
    UnknownDtype {
        name: String,
        tag: String,
        offset: u64,
    },

    /// A tensor entry in the header is internally inconsistent (bad shape,
    /// reversed or mis-sized byte range, empty name, ...).
    #[error("invalid tensor {name:?} at byte {offset}: {reason}")]
    BadTensor {
        name: String,
        offset: u64,
        reason: String,
    },

    #[error("offset gap: data block byte {offset} is not covered by any tensor")]
    OffsetGap { offset: u64 },

    #[error("offset overlap: tensor {name:?} range starts at byte {offset}, inside the previous tensor's range")]
    OffsetOverlap { name: String, offset: u64 },

    #[error("truncated data block: tensor {name:?} needs bytes up to {needed} but the file ends at {available}")]
    Truncated {
        name: String,
        needed: u64,
        available: u64,
    },

    /// First divergence found by [`crate::checkpoint::validate_compatible`].
    #[error("incompatible checkpoints at tensor {name:?}: {reason}")]
    Incompatible { name: String, reason: String },

    /// In-memory construction violated a checkpoint invariant.
    #[error("invalid tensor {name:?}: {reason}")]
    InvalidTensor { name: String, reason: String },
}

/// Errors raised by the task-vector / prune / consensus / merge pipeline.
#[derive(Debug, Error)]
pub enum MergeError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("invalid prune fractions: alpha {alpha} + beta {beta} must be finite, non-negative, and sum to at most 100")]
    InvalidFractions { alpha: f64, beta: f64 },

    #[error("merge scale lambda must be finite, got {0}")]
    NonFiniteLambda(f64),

    #[error("at least one model is required")]
    NoModels,

    #[error("task vector layout mismatch: {0}")]
    LayoutMismatch(String),
}

/// Errors raised by the quadruple scorer and its JSONL reader.
#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("bad JSONL record at line {line}: {reason}")]
    BadLine { line: usize, reason: String },

    #[error("duplicate sample_id {id:?}")]
    DuplicateSampleId { id: String },
}

/// Errors raised by the toy trainer.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset must be non-empty")]
    EmptyDataset,

    #[error("invalid training config: {0}")]
    BadConfig(String),

    #[error("non-finite value in input features")]
    NonFiniteInput,

    #[error("training diverged: loss became non-finite at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("checkpoint does not describe a tiny model: {0}")]
    BadArchitecture(String),
}
