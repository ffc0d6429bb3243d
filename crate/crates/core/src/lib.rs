//! Checkpoint merging toolkit: task-vector arithmetic with dual-tail pruning
//! and sign-consensus averaging, plus the quadruple-extraction scorer and a
//! small deterministic trainer for producing genuinely fine-tuned test models.
//!
//! The crate is organised around the merge pipeline:
//!
//! * [`checkpoint`] — bit-exact reading/writing of tensor checkpoint files.
//! * [`task_vector`] — deltas between a fine-tuned model and its base.
//! * [`prune`] — per-layer dual-tail magnitude masking.
//! * [`consensus`] — per-parameter sign election across pruned vectors.
//! * [`merge`] — survivor averaging, scaling, and end-to-end orchestration.
//! * [`metrics`] — hard/soft quadruple matching and micro-averaged F1.
//! * [`trainer`] — tiny dense classifiers trained with AdamW from a shared base.

pub mod checkpoint;
pub mod consensus;
pub mod error;
pub mod merge;
pub mod metrics;
pub mod prune;
pub mod rng;
pub mod task_vector;
pub mod trainer;

pub use checkpoint::{validate_compatible, Checkpoint, Dtype, TensorData, TensorMeta};
pub use consensus::{elect_sign, ConsensusSigns};
pub use error::{CheckpointError, MergeError, MetricsError, TrainError};
pub use merge::{
    merge_models, merge_task_vectors, LayerStats, MergeConfig, MergeOutcome, MergeStats,
};
pub use metrics::{
    hard_match, lcs_length, parse_quadruples, score, similarity, soft_match, Quadruple,
    SampleExtraction, ScoreReport,
};
pub use prune::{layer_mask, prune_task_vector, LayerGrouping, PruneConfig, PrunedTaskVector};
pub use task_vector::{apply_task_vector, build_task_vector, TaskVector};
pub use trainer::{
    accuracy, adamw_step, make_task_dataset, sft_loss, train, OptimState, TaskId, TinyModel,
    TrainConfig,
};
