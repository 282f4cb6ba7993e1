//! Block-sparse attention for iterative masked denoisers.
//!
//! Full attention runs for the first steps of a denoising schedule. At one
//! capture step each `(layer, head)` gets a block mask chosen from pooled
//! attention probabilities, ranked separately over prefill and generation
//! keys. Every later step reuses those masks through a block-sparse kernel.
//!
//! Modules, bottom up: [`numerics`], [`masks`], [`pattern`], [`attention`],
//! [`scheduler`], [`toydlm`], [`analysis`].

pub mod analysis;
pub mod attention;
pub mod error;
mod kernels;
pub mod masks;
pub mod numerics;
pub mod pattern;
pub mod rng;
pub mod scheduler;
pub mod toydlm;

pub use attention::{
    block_sparse_attention, dense_attention, masked_dense_attention, multi_head_attention,
    AttentionHook, FlopCounter, HeadInputs,
};
pub use error::{Error, Result};
pub use masks::{full_mask, sliding_window_mask, streaming_mask, BlockMask};
pub use numerics::{Matrix, MASKED};
pub use pattern::{build_pattern, PatternCache, PooledScores, SparseDConfig};
pub use rng::SeededRng;
pub use scheduler::{plan_step, run_schedule, Phase, ScheduleMode, StepTrace};
pub use toydlm::{
    generate, GenerateOptions, GenerateOutput, SequenceState, ToyModel, ToyModelConfig,
};

/// Version string recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
