use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::budget::{BudgetCounters, PhaseCount, QueryBudget};
use super::rollout::{
    rollout_trajectory, sample_turn_group, single_turn_episodes, split_history, start_history,
    traj_grpo_rollout_and_advantages, CountingSim, RolloutSettings, Trajectory, TurnGroup,
};
use super::update::{grpo_update, UpdateSample, UpdateStats};
use super::{Algorithm, Phase, TrainConfig};
use crate::error::RlError;
use crate::policy::{Checkpoint, FeatureMode, HistoryEntry, OptimizerState, PolicyParameters};
use crate::rng::{lane_rng, str_key, Lane};
use crate::spec_score::MetricVector;
use crate::surrogate::{QueryInstance, SimBackend, TaskDefinition};

pub const LOG_SCHEMA_VERSION: u32 = 1;
const SHUFFLE_KEY: u64 = u64::MAX;

/// One simulated design in a run log. `turn` is the observation index:
/// 0 for the initial point, `t + 1` for the action taken at context `h_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnLog {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<usize>,
    pub phase: Phase,
    pub query_id: String,
    pub task_id: String,
    pub turn: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub member: Option<usize>,
    pub params: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricVector>,
    pub valid: bool,
    pub reward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_prob_old: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advantage: Option<f64>,
}

impl TurnLog {
    pub fn initial(iteration: Option<usize>, query_id: &str, task_id: &str, entry: &HistoryEntry) -> TurnLog {
        TurnLog {
            iteration,
            phase: Phase::Initial,
            query_id: query_id.to_string(),
            task_id: task_id.to_string(),
            turn: 0,
            member: None,
            params: entry.params.clone(),
            choices: None,
            metrics: entry.observation.metrics.clone(),
            valid: entry.observation.valid,
            reward: entry.reward,
            log_prob_old: None,
            advantage: None,
        }
    }

    /// One record per turn of `traj`.
    pub fn from_trajectory(
        traj: &Trajectory,
        phase: Phase,
        iteration: Option<usize>,
        member: Option<usize>,
        advantage: Option<f64>,
    ) -> Vec<TurnLog> {
        traj.turns
            .iter()
            .enumerate()
            .map(|(t, turn)| TurnLog {
                iteration,
                phase,
                query_id: traj.query_id.clone(),
                task_id: traj.task_id.clone(),
                turn: t + 1,
                member,
                params: turn.action.params.clone(),
                choices: Some(turn.action.choices.clone()),
                metrics: turn.observation.metrics.clone(),
                valid: turn.observation.valid,
                reward: turn.reward,
                log_prob_old: Some(turn.log_prob_old),
                advantage,
            })
            .collect()
    }

    fn from_group(group: &TurnGroup, iteration: usize, task_id: &str) -> Vec<TurnLog> {
        group
            .members
            .iter()
            .zip(&group.advantages)
            .enumerate()
            .map(|(m, (member, &adv))| TurnLog {
                iteration: Some(iteration),
                phase: Phase::Group,
                query_id: group.context.query_id.clone(),
                task_id: task_id.to_string(),
                turn: group.context.turn_index + 1,
                member: Some(m),
                params: member.action.params.clone(),
                choices: Some(member.action.choices.clone()),
                metrics: member.observation.metrics.clone(),
                valid: member.observation.valid,
                reward: member.reward,
                log_prob_old: Some(member.log_prob_old),
                advantage: Some(adv),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub num_queries: usize,
    pub mean_reward: f64,
    pub policy_version: u64,
    #[serde(flatten)]
    pub update: UpdateStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Header { schema_version: u32, kind: String, label: String, config: serde_json::Value },
    Turn(TurnLog),
    Iteration(IterationSummary),
    Budget(super::budget::BudgetReport),
}

/// Receives the run log and periodic checkpoints.
pub trait RunSink {
    fn record(&mut self, record: &LogRecord) -> Result<(), RlError>;

    fn checkpoint(&mut self, _checkpoint: &Checkpoint) -> Result<(), RlError> {
        Ok(())
    }

    /// Whether per-turn records should be produced at all.
    fn wants_turns(&self) -> bool {
        true
    }
}

/// Discards everything.
pub struct NullSink;

impl RunSink for NullSink {
    fn record(&mut self, _record: &LogRecord) -> Result<(), RlError> {
        Ok(())
    }

    fn wants_turns(&self) -> bool {
        false
    }
}

impl RunSink for Vec<LogRecord> {
    fn record(&mut self, record: &LogRecord) -> Result<(), RlError> {
        self.push(record.clone());
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: PolicyParameters,
    pub optimizer: OptimizerState,
    pub budget: BudgetCounters,
    pub summaries: Vec<IterationSummary>,
    pub checkpoint: Checkpoint,
}

struct QueryRollout {
    samples: Vec<UpdateSample>,
    logs: Vec<TurnLog>,
    budget: QueryBudget,
    rewards: Vec<f64>,
}

fn turn_samples(traj: &Trajectory, advantage: f64) -> impl Iterator<Item = UpdateSample> + '_ {
    traj.turns.iter().map(move |t| UpdateSample {
        features: t.features.clone(),
        choices: t.action.choices.clone(),
        log_prob_old: t.log_prob_old,
        component_log_probs_old: t.component_log_probs_old.clone(),
        advantage,
    })
}

fn rollout_query(
    policy: &PolicyParameters,
    query: &QueryInstance,
    task: &TaskDefinition,
    iteration: usize,
    cfg: &TrainConfig,
    backend: &dyn SimBackend,
    with_logs: bool,
) -> Result<QueryRollout, RlError> {
    let settings = RolloutSettings::training(cfg.temperature, cfg.top_p);
    let lane = Lane::new(cfg.seed, &[iteration as u64, str_key(&query.query_id)]);
    let mut budget = QueryBudget::new(iteration, &query.query_id);
    let counting = CountingSim::new(backend);
    let initial = start_history(&counting, query, task)?;
    budget.initial_sims = counting.calls();

    let mut out = QueryRollout { samples: Vec::new(), logs: Vec::new(), budget, rewards: Vec::new() };
    if with_logs {
        out.logs.push(TurnLog::initial(Some(iteration), &query.query_id, &task.task_id, &initial));
    }
    let (g, t) = (cfg.group_size, cfg.max_turns);
    let group_lane = lane.child(Phase::Group.key());
    match cfg.algorithm {
        Algorithm::TlGrpo => {
            let traj = rollout_trajectory(
                policy, query, task, &initial, t, &lane.child(Phase::Seed.key()), backend, &settings, &mut out.budget.seed,
            )?;
            if with_logs {
                out.logs.extend(TurnLog::from_trajectory(&traj, Phase::Seed, Some(iteration), None, None));
            }
            for ctx in split_history(&traj, query, task, FeatureMode::MultiTurn) {
                let group_count: &mut PhaseCount = &mut out.budget.group;
                let lane_t = group_lane.child(ctx.turn_index as u64);
                let group = sample_turn_group(policy, &ctx, task, query, g, &lane_t, backend, &settings, group_count)?;
                if with_logs {
                    out.logs.extend(TurnLog::from_group(&group, iteration, &task.task_id));
                }
                out.rewards.extend(group.members.iter().map(|m| m.reward));
                out.samples.extend(group.update_samples());
            }
        }
        Algorithm::TrajGrpo => {
            let group = traj_grpo_rollout_and_advantages(
                policy, query, task, &initial, g, t, &lane.child(Phase::Trajectory.key()), backend, &settings,
                &mut out.budget.group,
            )?;
            for (m, (traj, adv)) in group.iter().enumerate() {
                if with_logs {
                    out.logs.extend(TurnLog::from_trajectory(traj, Phase::Trajectory, Some(iteration), Some(m), Some(*adv)));
                }
                out.rewards.extend(traj.rewards());
                out.samples.extend(turn_samples(traj, *adv));
            }
        }
        Algorithm::SingleTurnGrpo => {
            let group = single_turn_episodes(
                policy, query, task, &initial, g, &group_lane.child(0), backend, &settings, &mut out.budget.group,
            )?;
            if with_logs {
                out.logs.extend(TurnLog::from_group(&group, iteration, &task.task_id));
            }
            out.rewards.extend(group.members.iter().map(|m| m.reward));
            out.samples.extend(group.update_samples());
        }
    }
    Ok(out)
}

/// Query order: each epoch is an independent seeded shuffle.
struct QueryStream {
    n: usize,
    seed: u64,
    orders: Vec<Vec<usize>>,
}

impl QueryStream {
    fn index(&mut self, position: usize) -> usize {
        let epoch = position / self.n;
        while self.orders.len() <= epoch {
            let mut order: Vec<usize> = (0..self.n).collect();
            order.shuffle(&mut lane_rng(self.seed, &[SHUFFLE_KEY, self.orders.len() as u64]));
            self.orders.push(order);
        }
        self.orders[epoch][position % self.n]
    }
}

/// Runs the full training loop: freeze, roll out, compute advantages, update.
pub fn train(
    cfg: &TrainConfig,
    tasks: &[TaskDefinition],
    queries: &[QueryInstance],
    backend: &dyn SimBackend,
    init: Option<Checkpoint>,
    sink: &mut dyn RunSink,
) -> Result<TrainOutcome, RlError> {
    cfg.validate()?;
    if queries.is_empty() {
        return Err(RlError::InvalidConfig("no training queries".into()));
    }
    let task_of = |q: &QueryInstance| -> Result<&TaskDefinition, RlError> {
        tasks
            .iter()
            .find(|t| t.task_id == q.task_id)
            .ok_or_else(|| RlError::InvalidConfig(format!("query {} names unknown task {}", q.query_id, q.task_id)))
    };
    for q in queries {
        task_of(q)?;
        if q.max_turns < cfg.max_turns {
            return Err(RlError::InvalidConfig(format!(
                "query {} allows {} turns but training uses {}",
                q.query_id, q.max_turns, cfg.max_turns
            )));
        }
    }

    let (mut policy, mut optimizer) = match init {
        Some(ckpt) => (ckpt.policy, ckpt.optimizer),
        None => {
            let p = PolicyParameters::zeros();
            let opt = OptimizerState::new(p.weights.len(), cfg.lr);
            (p, opt)
        }
    };
    optimizer.lr = cfg.lr;
    let reference = policy.clone();
    let with_logs = sink.wants_turns();
    sink.record(&LogRecord::Header {
        schema_version: LOG_SCHEMA_VERSION,
        kind: "train".into(),
        label: cfg.algorithm.label().into(),
        config: serde_json::to_value(cfg).expect("config serializes"),
    })?;

    let iterations = cfg.num_iterations(queries.len());
    let limit = if cfg.iterations.is_some() { usize::MAX } else { cfg.epochs * queries.len() };
    let mut stream = QueryStream { n: queries.len(), seed: cfg.seed, orders: Vec::new() };
    let mut budget = BudgetCounters::default();
    let mut summaries = Vec::with_capacity(iterations);

    for iteration in 0..iterations {
        let at = |e: RlError| RlError::Iteration { iteration, message: e.to_string() };
        let start = iteration * cfg.batch_queries;
        let end = (start + cfg.batch_queries).min(limit);
        let batch: Vec<&QueryInstance> = (start..end).map(|p| &queries[stream.index(p)]).collect();

        let policy_old = policy.clone();
        let rollouts = batch
            .par_iter()
            .map(|q| rollout_query(&policy_old, q, task_of(q)?, iteration, cfg, backend, with_logs))
            .collect::<Result<Vec<_>, _>>()
            .map_err(at)?;

        let mut samples = Vec::new();
        let mut rewards = Vec::new();
        for r in rollouts {
            for log in r.logs {
                sink.record(&LogRecord::Turn(log))?;
            }
            budget.per_query.push(r.budget);
            rewards.extend(r.rewards);
            samples.extend(r.samples);
        }
        let stats = grpo_update(&mut policy, &mut optimizer, Some(&reference), &samples, cfg).map_err(at)?;
        let summary = IterationSummary {
            iteration,
            num_queries: batch.len(),
            mean_reward: rewards.iter().sum::<f64>() / rewards.len().max(1) as f64,
            policy_version: policy.version,
            update: stats,
        };
        sink.record(&LogRecord::Iteration(summary.clone()))?;
        summaries.push(summary);
        if cfg.checkpoint_every.is_some_and(|every| (iteration + 1) % every == 0) {
            sink.checkpoint(&Checkpoint::new(iteration + 1, policy.clone(), optimizer.clone()))?;
        }
    }

    let checkpoint = Checkpoint::new(iterations, policy.clone(), optimizer.clone());
    Ok(TrainOutcome { policy, optimizer, budget, summaries, checkpoint })
}
