//! Data-free structured channel pruning.
//!
//! A trained CNN is pruned layer by layer to a global parameter budget. Each
//! pruned output channel is folded into a similar kept channel of the same
//! layer by rescaling the successor's weights, so no data or fine-tuning is
//! needed. Per-layer preserve ratios and the channel-selection trade-off are
//! searched by a Soft Actor-Critic agent rewarded with validation accuracy.

pub mod bundle;
pub mod env;
pub mod error;
pub mod nn;
pub mod plan;
pub mod policy;
pub mod pruner;
pub mod reconstruct;
pub mod rng;
pub mod sac;
pub mod similarity;
pub mod tensor;

pub use error::{Error, Result};
