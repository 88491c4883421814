//! Turn-level group relative policy optimization for iterative design tasks.
//!
//! The crate bundles the reward math, a deterministic surrogate sizing
//! environment, a factored softmax policy, the rollout and update machinery
//! for three GRPO variants, and a Bayesian-optimization baseline.

pub mod bo;
pub mod error;
pub mod rng;
pub mod spec_score;
pub mod policy;
pub mod rl;
pub mod surrogate;

pub use error::{BoError, EnvError, PolicyError, RlError, ScoreError};
