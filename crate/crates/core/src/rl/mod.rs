//! Rollouts, group-relative advantages and the clipped policy update for
//! turn-level, trajectory-level and single-turn GRPO.

mod budget;
mod eval;
mod rollout;
mod train;
mod update;

pub use budget::{budget_audit, BudgetCounters, BudgetReport, PhaseCount, QueryBudget};
pub use eval::{evaluate_policy, EvalEpisode, EvalSettings};
pub use rollout::{
    rollout_trajectory, sample_turn_group, single_turn_episodes, split_history, start_history,
    traj_grpo_rollout_and_advantages, GroupMember, HistoryContext, RolloutSettings, Trajectory, TurnGroup,
    TurnRecord,
};
pub use train::{
    train, IterationSummary, LogRecord, NullSink, RunSink, TrainOutcome, TurnLog, LOG_SCHEMA_VERSION,
};
pub use update::{grpo_update, objective_and_gradient, tl_grpo_update, UpdateSample, UpdateStats};

use serde::{Deserialize, Serialize};

use crate::error::RlError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    TlGrpo,
    TrajGrpo,
    SingleTurnGrpo,
}

impl Algorithm {
    pub fn label(self) -> &'static str {
        match self {
            Algorithm::TlGrpo => "tl-grpo",
            Algorithm::TrajGrpo => "traj-grpo",
            Algorithm::SingleTurnGrpo => "single-turn-grpo",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = RlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tl-grpo" => Ok(Algorithm::TlGrpo),
            "traj-grpo" => Ok(Algorithm::TrajGrpo),
            "single-turn-grpo" | "single-turn" => Ok(Algorithm::SingleTurnGrpo),
            other => Err(RlError::InvalidConfig(format!("unknown algorithm `{other}`"))),
        }
    }
}

/// Training hyperparameters.
///
/// The reference learning rate for a 30B language model is `1e-6`; the
/// default here is `1e-2` because the policy is a small linear model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub batch_queries: usize,
    pub group_size: usize,
    pub max_turns: usize,
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta_kl: f64,
    pub temperature: f64,
    pub top_p: f64,
    pub lr: f64,
    pub seed: u64,
    pub epochs: usize,
    /// Overrides the epoch-derived iteration count; the query stream keeps cycling.
    pub iterations: Option<usize>,
    /// Use per-component importance ratios instead of the whole-action ratio.
    pub per_component_ratio: bool,
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algorithm: Algorithm::TlGrpo,
            batch_queries: 32,
            group_size: 8,
            max_turns: 5,
            eps_low: 0.2,
            eps_high: 0.28,
            beta_kl: 0.0,
            temperature: 1.0,
            top_p: 0.95,
            lr: 1e-2,
            seed: 0,
            epochs: 1,
            iterations: None,
            per_component_ratio: false,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: String| Err(RlError::InvalidConfig(m));
        if self.group_size < 2 {
            return bad(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if self.batch_queries == 0 || self.max_turns == 0 || self.epochs == 0 {
            return bad("batch_queries, max_turns and epochs must be >= 1".into());
        }
        if !(self.eps_low > 0.0 && self.eps_high > 0.0 && self.eps_low < 1.0) {
            return bad(format!("clip ratios must satisfy 0 < eps_low < 1, eps_high > 0 (got {}, {})", self.eps_low, self.eps_high));
        }
        if !(self.beta_kl >= 0.0 && self.beta_kl.is_finite()) {
            return bad(format!("beta_kl must be >= 0, got {}", self.beta_kl));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.iterations == Some(0) || self.checkpoint_every == Some(0) {
            return bad("iterations and checkpoint_every must be >= 1 when set".into());
        }
        Ok(())
    }

    /// `ceil(epochs · n / batch)` unless overridden.
    pub fn num_iterations(&self, num_queries: usize) -> usize {
        self.iterations
            .unwrap_or_else(|| (self.epochs * num_queries).div_ceil(self.batch_queries))
    }
}

/// Rollout phase, also used as a seed-derivation key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Initial,
    Seed,
    Group,
    Trajectory,
    Eval,
}

impl Phase {
    pub fn key(self) -> u64 {
        match self {
            Phase::Initial => 0,
            Phase::Seed => 1,
            Phase::Group => 2,
            Phase::Trajectory => 3,
            Phase::Eval => 4,
        }
    }
}

/// `A_i = (R_i − mean) / std` with population std; constant groups map to zeros.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, RlError> {
    if rewards.len() < 2 {
        return Err(RlError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    if std < 1e-8 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `min(r·A, clip(r, 1 − eps_low, 1 + eps_high)·A)`
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps_low: f64, eps_high: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps_low, 1.0 + eps_high);
    (ratio * advantage).min(clipped * advantage)
}

/// Whether the unclipped branch is the minimum, i.e. the gradient flows.
fn surrogate_active(ratio: f64, advantage: f64, eps_low: f64, eps_high: f64) -> bool {
    if advantage > 0.0 {
        ratio <= 1.0 + eps_high
    } else if advantage < 0.0 {
        ratio >= 1.0 - eps_low
    } else {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::lane_rng;
    use proptest::prelude::{prop_assert, proptest};
    use rand::Rng;

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[0.0, 1.0]).unwrap(), vec![-1.0, 1.0]);
        assert_eq!(group_advantages(&[0.7, 0.7, 0.7]).unwrap(), vec![0.0; 3]);
        assert_eq!(group_advantages(&[0.3]), Err(RlError::GroupTooSmall(1)));
    }

    #[test]
    fn advantage_moments() {
        let mut rng = lane_rng(1, &[]);
        for _ in 0..2000 {
            let g = rng.gen_range(2..=16);
            let r: Vec<f64> = (0..g).map(|_| rng.gen()).collect();
            let a = group_advantages(&r).unwrap();
            let mean = a.iter().sum::<f64>() / g as f64;
            let var = a.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / g as f64;
            assert!(mean.abs() < 1e-9 && (var.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn surrogate_examples() {
        assert!((clipped_surrogate(1.5, 1.0, 0.2, 0.28) - 1.28).abs() < 1e-12);
        assert_eq!(clipped_surrogate(0.5, 1.0, 0.2, 0.28), 0.5);
        assert!((clipped_surrogate(0.5, -1.0, 0.2, 0.28) + 0.8).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn surrogate_clip_bound(ratio in 1e-6f64..1.0, a in -10.0f64..10.0) {
            let ratio = ratio * 1.28;
            prop_assert!(clipped_surrogate(ratio, a, 0.2, 0.28).abs() <= 1.28 * a.abs() + 1e-12);
        }
    }

    #[test]
    fn iteration_count() {
        assert_eq!(TrainConfig::default().num_iterations(10_000), 313);
        let cfg = TrainConfig { iterations: Some(300), ..TrainConfig::default() };
        assert_eq!(cfg.num_iterations(10_000), 300);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { group_size: 1, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { eps_low: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { top_p: 1.5, ..TrainConfig::default() }.validate().is_err());
    }
}
