//! Fatal-aware multi-turn GRPO for tool-using agents.
//!
//! The crate models multi-turn tool-use trajectories with per-token
//! provenance, runs them against ToolWorld (a seeded synthetic multi-hop
//! lookup environment), scores them with a gated composite reward, and
//! optimizes a tabular softmax policy with group-relative policy
//! optimization. Fatal error cascades are detected per trajectory; the
//! post-fatal suffix is masked out of the loss and fatal trajectories only
//! ever receive non-negative advantages.
//!
//! Numeric code is generic over [`Scalar`] (f32 or f64). The aliases below
//! fix it to f64, which every tolerance in the test suites assumes.

pub mod env;
pub mod error;
pub mod fixtures;
pub mod grpo;
pub mod harness;
pub mod oracle;
pub mod policy;
pub mod reward;
mod scalar;
pub mod trajectory;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Tabular policy parameters.
pub type PolicyParams = policy::LogitTable<f64>;
pub type PolicyParamsF32 = policy::LogitTable<f32>;
/// Per-trajectory reward components.
pub type RewardBreakdown = reward::Breakdown<f64>;
/// One prompt's rollouts with rewards and advantages.
pub type GroupBatch = grpo::Group<f64>;
