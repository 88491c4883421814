use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::budget::PhaseCount;
use super::group_advantages;
use crate::error::{EnvError, RlError};
use crate::policy::{
    action_distribution, component_log_probs, featurize, sample_action, FactoredAction, FeatureMode, History,
    HistoryEntry, HistoryFeatures, PolicyParameters,
};
use crate::rng::Lane;
use crate::spec_score::{MetricVector, RewardMode};
use crate::surrogate::{initial_observation, step_with, ActionVector, Observation, QueryInstance, SimBackend, TaskDefinition};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutSettings {
    pub temperature: f64,
    pub top_p: f64,
    pub reward_mode: RewardMode,
    pub feature_mode: FeatureMode,
}

impl RolloutSettings {
    pub fn training(temperature: f64, top_p: f64) -> Self {
        RolloutSettings { temperature, top_p, reward_mode: RewardMode::Train, feature_mode: FeatureMode::MultiTurn }
    }
}

/// Counts calls that reach the simulator.
pub(super) struct CountingSim<'a> {
    inner: &'a dyn SimBackend,
    calls: AtomicU64,
}

impl<'a> CountingSim<'a> {
    pub(super) fn new(inner: &'a dyn SimBackend) -> Self {
        CountingSim { inner, calls: AtomicU64::new(0) }
    }

    pub(super) fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl SimBackend for CountingSim<'_> {
    fn simulate(&self, task: &TaskDefinition, params: &ActionVector) -> Result<MetricVector, EnvError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.simulate(task, params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub features: HistoryFeatures,
    pub action: FactoredAction,
    /// Full-softmax log-density under the sampling policy.
    pub log_prob_old: f64,
    pub component_log_probs_old: Vec<f64>,
    /// Log-probability of the nucleus-truncated draw.
    pub sample_log_prob: f64,
    pub observation: Observation,
    pub reward: f64,
}

impl TurnRecord {
    fn entry(&self) -> HistoryEntry {
        HistoryEntry {
            params: self.action.params.clone(),
            choices: Some(self.action.choices.clone()),
            observation: self.observation.clone(),
            reward: self.reward,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub query_id: String,
    pub task_id: String,
    pub initial: HistoryEntry,
    pub turns: Vec<TurnRecord>,
}

impl Trajectory {
    /// `(o_0, a_0, …, o_t)` for the first `t` policy turns.
    pub fn prefix(&self, t: usize) -> History {
        let mut h = History::new(self.initial.clone());
        for turn in &self.turns[..t] {
            h.push(turn.entry());
        }
        h
    }

    /// Maximum reward over the policy turns.
    pub fn value(&self) -> f64 {
        self.turns.iter().map(|t| t.reward).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Maximum reward over the initial point and every policy turn.
    pub fn best_score(&self) -> f64 {
        self.value().max(self.initial.reward)
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.turns.iter().map(|t| t.reward).collect()
    }
}

/// Simulates the query's initial point. The single call is reported separately from phase budgets.
pub fn start_history(backend: &dyn SimBackend, query: &QueryInstance, task: &TaskDefinition) -> Result<HistoryEntry, RlError> {
    let (observation, reward) =
        initial_observation(backend, query, task).map_err(|source| RlError::Env { turn: 0, source })?;
    Ok(HistoryEntry { params: query.initial_params.clone(), choices: None, observation, reward })
}

struct Sampled {
    features: HistoryFeatures,
    action: FactoredAction,
    log_prob_old: f64,
    component_log_probs_old: Vec<f64>,
    sample_log_prob: f64,
}

fn sample_at(
    policy: &PolicyParameters,
    features: HistoryFeatures,
    current: &[f64],
    task: &TaskDefinition,
    lane: &Lane,
    settings: &RolloutSettings,
) -> Result<Sampled, RlError> {
    let dist = action_distribution(policy, &features, settings.temperature)?;
    let (action, sample_log_prob) = sample_action(&dist, &mut lane.rng(), settings.top_p, current, &task.bounds)?;
    let component_log_probs_old = component_log_probs(policy, &features, &action.choices, settings.temperature)?;
    Ok(Sampled {
        log_prob_old: component_log_probs_old.iter().sum(),
        component_log_probs_old,
        features,
        action,
        sample_log_prob,
    })
}

fn act(
    backend: &CountingSim<'_>,
    query: &QueryInstance,
    task: &TaskDefinition,
    sampled: Sampled,
    turn: usize,
    mode: RewardMode,
) -> Result<TurnRecord, RlError> {
    let (observation, reward) = step_with(backend, query, task, &ActionVector(sampled.action.params.clone()), turn, mode)
        .map_err(|source| RlError::Env { turn, source })?;
    Ok(TurnRecord {
        features: sampled.features,
        action: sampled.action,
        log_prob_old: sampled.log_prob_old,
        component_log_probs_old: sampled.component_log_probs_old,
        sample_log_prob: sampled.sample_log_prob,
        observation,
        reward,
    })
}

/// Samples one full `T`-turn trajectory from `policy`. Turn `t` draws from `lane.child(t)`.
#[allow(clippy::too_many_arguments)]
pub fn rollout_trajectory(
    policy: &PolicyParameters,
    query: &QueryInstance,
    task: &TaskDefinition,
    initial: &HistoryEntry,
    max_turns: usize,
    lane: &Lane,
    backend: &dyn SimBackend,
    settings: &RolloutSettings,
    count: &mut PhaseCount,
) -> Result<Trajectory, RlError> {
    if max_turns == 0 {
        return Err(RlError::InvalidConfig("rollouts need at least one turn".into()));
    }
    let counting = CountingSim::new(backend);
    let mut history = History::new(initial.clone());
    let mut turns = Vec::with_capacity(max_turns);
    for t in 0..max_turns {
        let features = featurize(&history, query, task, settings.feature_mode);
        let sampled = sample_at(policy, features, history.current_params(), task, &lane.child(t as u64), settings)?;
        count.samples += 1;
        let record = act(&counting, query, task, sampled, t, settings.reward_mode)?;
        history.push(record.entry());
        turns.push(record);
    }
    count.sims += counting.calls();
    Ok(Trajectory { query_id: query.query_id.clone(), task_id: task.task_id.clone(), initial: initial.clone(), turns })
}

/// `h_t`: the seed trajectory's prefix through `o_t`, materialized as features.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryContext {
    pub query_id: String,
    pub turn_index: usize,
    pub history: History,
    pub features: HistoryFeatures,
}

/// One context per turn of `traj`: `h_0 = (q, o_0)` through `h_{T−1}`.
pub fn split_history(traj: &Trajectory, query: &QueryInstance, task: &TaskDefinition, mode: FeatureMode) -> Vec<HistoryContext> {
    (0..traj.turns.len())
        .map(|t| {
            let history = traj.prefix(t);
            HistoryContext {
                query_id: traj.query_id.clone(),
                turn_index: t,
                features: featurize(&history, query, task, mode),
                history,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMember {
    pub action: FactoredAction,
    pub log_prob_old: f64,
    pub component_log_probs_old: Vec<f64>,
    pub sample_log_prob: f64,
    pub observation: Observation,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnGroup {
    pub context: HistoryContext,
    pub members: Vec<GroupMember>,
    pub advantages: Vec<f64>,
}

/// Draws `G` fresh actions at one context. Member `m` draws from `lane.child(m)`.
#[allow(clippy::too_many_arguments)]
pub fn sample_turn_group(
    policy: &PolicyParameters,
    context: &HistoryContext,
    task: &TaskDefinition,
    query: &QueryInstance,
    group_size: usize,
    lane: &Lane,
    backend: &dyn SimBackend,
    settings: &RolloutSettings,
    count: &mut PhaseCount,
) -> Result<TurnGroup, RlError> {
    if group_size < 2 {
        return Err(RlError::GroupTooSmall(group_size));
    }
    let counting = CountingSim::new(backend);
    let current = context.history.current_params();
    let mut members = Vec::with_capacity(group_size);
    for m in 0..group_size {
        let sampled = sample_at(policy, context.features.clone(), current, task, &lane.child(m as u64), settings)?;
        count.samples += 1;
        let r = act(&counting, query, task, sampled, context.turn_index, settings.reward_mode)?;
        members.push(GroupMember {
            action: r.action,
            log_prob_old: r.log_prob_old,
            component_log_probs_old: r.component_log_probs_old,
            sample_log_prob: r.sample_log_prob,
            observation: r.observation,
            reward: r.reward,
        });
    }
    count.sims += counting.calls();
    let rewards: Vec<f64> = members.iter().map(|m| m.reward).collect();
    Ok(TurnGroup { context: context.clone(), advantages: group_advantages(&rewards)?, members })
}

/// A group at the bare-query context `(q, o_0)`.
#[allow(clippy::too_many_arguments)]
pub fn single_turn_episodes(
    policy: &PolicyParameters,
    query: &QueryInstance,
    task: &TaskDefinition,
    initial: &HistoryEntry,
    group_size: usize,
    lane: &Lane,
    backend: &dyn SimBackend,
    settings: &RolloutSettings,
    count: &mut PhaseCount,
) -> Result<TurnGroup, RlError> {
    let history = History::new(initial.clone());
    let context = HistoryContext {
        query_id: query.query_id.clone(),
        turn_index: 0,
        features: featurize(&history, query, task, settings.feature_mode),
        history,
    };
    sample_turn_group(policy, &context, task, query, group_size, lane, backend, settings, count)
}

/// `G` full trajectories; trajectory `m` draws from `lane.child(m)` and every
/// one of its turns carries the advantage of `max_t r_t` within the group.
#[allow(clippy::too_many_arguments)]
pub fn traj_grpo_rollout_and_advantages(
    policy: &PolicyParameters,
    query: &QueryInstance,
    task: &TaskDefinition,
    initial: &HistoryEntry,
    group_size: usize,
    max_turns: usize,
    lane: &Lane,
    backend: &dyn SimBackend,
    settings: &RolloutSettings,
    count: &mut PhaseCount,
) -> Result<Vec<(Trajectory, f64)>, RlError> {
    if group_size < 2 {
        return Err(RlError::GroupTooSmall(group_size));
    }
    let trajectories = (0..group_size)
        .map(|m| rollout_trajectory(policy, query, task, initial, max_turns, &lane.child(m as u64), backend, settings, count))
        .collect::<Result<Vec<_>, _>>()?;
    let values: Vec<f64> = trajectories.iter().map(Trajectory::value).collect();
    let advantages = group_advantages(&values)?;
    Ok(trajectories.into_iter().zip(advantages).collect())
}
