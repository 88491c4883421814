//! Evaluation reports and the per-turn analysis.
//!
//! Everything here is computed from per-query reward traces, which in turn are
//! rebuilt from run logs, so a report can always be re-derived and checked.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use tlgrpo_core::rl::{Phase, TurnLog};

use crate::HarnessError;

/// Rewards of one evaluated query, indexed by observation: `[initial, turn 1, …]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryTrace {
    pub query_id: String,
    pub task_id: String,
    pub rewards: Vec<f64>,
}

impl QueryTrace {
    pub fn score(&self) -> f64 {
        self.rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn history_best(&self) -> Vec<f64> {
        history_best(&self.rewards)
    }
}

/// Running maximum.
pub fn history_best(rewards: &[f64]) -> Vec<f64> {
    rewards
        .iter()
        .scan(f64::NEG_INFINITY, |best, &r| {
            *best = best.max(r);
            Some(*best)
        })
        .collect()
}

/// Groups evaluation turn records by query. Each query must have exactly one
/// initial record (turn 0) and consecutive turns after it.
pub fn traces_from_turns<'a>(turns: impl IntoIterator<Item = &'a TurnLog>) -> Result<Vec<QueryTrace>, HarnessError> {
    let mut by_query: BTreeMap<&str, (&str, BTreeMap<usize, &TurnLog>)> = BTreeMap::new();
    for t in turns {
        let entry = by_query.entry(&t.query_id).or_insert((&t.task_id, BTreeMap::new()));
        if entry.0 != t.task_id {
            return Err(HarnessError::Verify(format!("query {} logged under two tasks", t.query_id)));
        }
        if entry.1.insert(t.turn, t).is_some() {
            return Err(HarnessError::Verify(format!("query {} has two records for turn {}", t.query_id, t.turn)));
        }
    }
    by_query
        .into_iter()
        .map(|(query_id, (task_id, turns))| {
            let mut rewards = Vec::with_capacity(turns.len());
            for (i, (turn, rec)) in turns.into_iter().enumerate() {
                if turn != i {
                    return Err(HarnessError::Verify(format!("query {query_id} is missing turn {i}")));
                }
                let expected = if i == 0 { Phase::Initial } else { Phase::Eval };
                if rec.phase != expected {
                    return Err(HarnessError::Verify(format!("query {query_id} turn {i} has phase {:?}", rec.phase)));
                }
                rewards.push(rec.reward);
            }
            Ok(QueryTrace { query_id: query_id.to_string(), task_id: task_id.to_string(), rewards })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub queries: usize,
    pub mean_best: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub protocol: String,
    pub split: String,
    pub per_task: BTreeMap<String, TaskSummary>,
    /// Mean of the per-task means, like an "Avg." column.
    pub overall_mean: f64,
    /// Mean reward at each observation index; entry 0 is the initial point.
    pub per_turn_mean: Vec<f64>,
    /// Mean running-best reward at each observation index.
    pub per_turn_history_best: Vec<f64>,
    /// Best reward over the initial point and every turn, per query.
    pub scores: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn from_traces(method: &str, protocol: &str, split: &str, traces: &[QueryTrace]) -> EvalReport {
        let mut per_task_scores: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut scores = BTreeMap::new();
        let horizon = traces.iter().map(|t| t.rewards.len()).max().unwrap_or(0);
        let mut turn_sum = vec![0.0; horizon];
        let mut best_sum = vec![0.0; horizon];
        let mut turn_count = vec![0usize; horizon];
        for trace in traces {
            let score = trace.score();
            scores.insert(trace.query_id.clone(), score);
            per_task_scores.entry(trace.task_id.clone()).or_default().push(score);
            for (i, (r, b)) in trace.rewards.iter().zip(trace.history_best()).enumerate() {
                turn_sum[i] += r;
                best_sum[i] += b;
                turn_count[i] += 1;
            }
        }
        let per_task: BTreeMap<String, TaskSummary> = per_task_scores
            .into_iter()
            .map(|(task, s)| (task, TaskSummary { queries: s.len(), mean_best: mean(&s) }))
            .collect();
        let overall_mean = mean(&per_task.values().map(|t| t.mean_best).collect::<Vec<_>>());
        let avg = |sums: &[f64]| sums.iter().zip(&turn_count).map(|(s, &n)| s / n as f64).collect::<Vec<_>>();
        EvalReport {
            method: method.to_string(),
            protocol: protocol.to_string(),
            split: split.to_string(),
            per_task,
            overall_mean,
            per_turn_mean: avg(&turn_sum),
            per_turn_history_best: avg(&best_sum),
            scores,
        }
    }

    /// Mean over queries of the per-query best score.
    pub fn mean_query_score(&self) -> f64 {
        mean(&self.scores.values().copied().collect::<Vec<_>>())
    }

    pub fn summary_table(&self) -> String {
        let mut out = format!("method={} protocol={} split={}\n", self.method, self.protocol, self.split);
        let _ = writeln!(out, "{:<16} {:>8} {:>10}", "task", "queries", "mean_best");
        for (task, s) in &self.per_task {
            let _ = writeln!(out, "{task:<16} {:>8} {:>10.4}", s.queries, s.mean_best);
        }
        let _ = writeln!(out, "{:<16} {:>8} {:>10.4}", "avg", self.scores.len(), self.overall_mean);
        let _ = writeln!(out, "turn mean     {}", sparkline(&self.per_turn_mean));
        let _ = writeln!(out, "history best  {}", sparkline(&self.per_turn_history_best));
        out
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Fixed CSV header for the turn analysis.
pub const TURN_CSV_HEADER: &str = "method,protocol,split,turn,mean_score,mean_history_best,queries";

/// One row per observation index of each report.
pub fn turn_csv(reports: &[EvalReport], traces: &[Vec<QueryTrace>]) -> String {
    let mut out = String::from(TURN_CSV_HEADER);
    out.push('\n');
    for (r, tr) in reports.iter().zip(traces) {
        for (turn, (m, b)) in r.per_turn_mean.iter().zip(&r.per_turn_history_best).enumerate() {
            let n = tr.iter().filter(|t| t.rewards.len() > turn).count();
            let _ = writeln!(out, "{},{},{},{turn},{m:.6},{b:.6},{n}", r.method, r.protocol, r.split);
        }
    }
    out
}

/// Block-character plot of values in [0, 1].
pub fn sparkline(values: &[f64]) -> String {
    const BARS: [char; 8] = ['▁', '▂', '▃', '▄', '▅', '▆', '▇', '█'];
    values
        .iter()
        .map(|v| {
            let idx = (v.clamp(0.0, 1.0) * (BARS.len() - 1) as f64).round() as usize;
            BARS[idx]
        })
        .collect()
}

/// Structural checks on traces: score is the max reward and running bests never drop.
pub fn check_traces(traces: &[QueryTrace], initial: &BTreeMap<String, f64>) -> Result<(), HarnessError> {
    for t in traces {
        let hb = t.history_best();
        if hb.windows(2).any(|w| w[1] < w[0]) {
            return Err(HarnessError::Verify(format!("history best of {} decreases", t.query_id)));
        }
        if hb.last().copied() != Some(t.score()) {
            return Err(HarnessError::Verify(format!("score of {} is not its best reward", t.query_id)));
        }
        if initial.get(&t.query_id).copied() != t.rewards.first().copied() {
            return Err(HarnessError::Verify(format!("turn 0 of {} is not the initial-point reward", t.query_id)));
        }
    }
    Ok(())
}
