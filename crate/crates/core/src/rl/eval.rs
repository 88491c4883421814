use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::budget::PhaseCount;
use super::rollout::{rollout_trajectory, start_history, RolloutSettings, Trajectory};
use super::Phase;
use crate::error::RlError;
use crate::policy::{FeatureMode, PolicyParameters};
use crate::rng::{str_key, Lane};
use crate::spec_score::RewardMode;
use crate::surrogate::{QueryInstance, SimBackend, TaskDefinition};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub seed: u64,
    pub max_turns: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub feature_mode: FeatureMode,
}

/// One evaluated query: the rollout and its score, the best Eval reward over
/// the initial point and every turn.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalEpisode {
    pub trajectory: Trajectory,
    pub score: f64,
}

/// Rolls out `policy` on every query with Eval rewards, in parallel and in query order.
pub fn evaluate_policy(
    policy: &PolicyParameters,
    tasks: &[TaskDefinition],
    queries: &[QueryInstance],
    backend: &dyn SimBackend,
    settings: &EvalSettings,
) -> Result<Vec<EvalEpisode>, RlError> {
    let rollout = RolloutSettings {
        temperature: settings.temperature,
        top_p: settings.top_p,
        reward_mode: RewardMode::Eval,
        feature_mode: settings.feature_mode,
    };
    queries
        .par_iter()
        .map(|query| {
            let task = tasks
                .iter()
                .find(|t| t.task_id == query.task_id)
                .ok_or_else(|| RlError::InvalidConfig(format!("query {} names unknown task {}", query.query_id, query.task_id)))?;
            let initial = start_history(backend, query, task)?;
            let lane = Lane::new(settings.seed, &[Phase::Eval.key(), str_key(&query.query_id)]);
            let mut count = PhaseCount::default();
            let trajectory =
                rollout_trajectory(policy, query, task, &initial, settings.max_turns, &lane, backend, &rollout, &mut count)?;
            Ok(EvalEpisode { score: trajectory.best_score(), trajectory })
        })
        .collect()
}
