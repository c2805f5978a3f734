//! Training-free one-shot pruning for selective state-space (Mamba-style) models.
//!
//! The SSM transition `A_log` is pruned with a second-order importance score
//! aggregated over time steps; the linear and conv modules are pruned with
//! layer-wise OBS under a Hessian-trace sparsity schedule.

pub mod calibration;
pub mod checkpoint;
pub mod error;
pub mod eval;
mod fit;
pub mod ffn_prune;
pub mod fixtures;
pub mod model;
pub mod oracles;
pub mod pipeline;
pub mod ssm_prune;
pub mod tensor;

pub use calibration::{CalibrationSet, HiddenStats};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use error::{Error, Result};
pub use eval::{perplexity, reconstruction_error, PruneReport};
pub use ffn_prune::{GramAccumulator, SparsityPlan};
pub use model::{MambaConfig, MambaLayer, MambaModel};
pub use pipeline::{run_baseline_magnitude, run_pipeline, RunConfig};
pub use ssm_prune::{ImportanceField, Pattern, PruneMask, ScoreMode};
pub use tensor::Tensor;
