use serde::{Deserialize, Serialize};

use super::{Algorithm, TrainConfig};
use crate::error::RlError;

/// Policy samples and simulator calls made within one phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PhaseCount {
    pub samples: u64,
    pub sims: u64,
}

/// Counts for one query visit within one iteration.
///
/// `initial_sims` covers the simulation of the query's starting point, which
/// every method pays once and which is reported apart from the rollout budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryBudget {
    pub iteration: usize,
    pub query_id: String,
    pub initial_sims: u64,
    pub seed: PhaseCount,
    pub group: PhaseCount,
}

impl QueryBudget {
    pub fn new(iteration: usize, query_id: impl Into<String>) -> Self {
        QueryBudget {
            iteration,
            query_id: query_id.into(),
            initial_sims: 0,
            seed: PhaseCount::default(),
            group: PhaseCount::default(),
        }
    }

    pub fn total(&self) -> PhaseCount {
        PhaseCount { samples: self.seed.samples + self.group.samples, sims: self.seed.sims + self.group.sims }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BudgetCounters {
    pub per_query: Vec<QueryBudget>,
}

impl BudgetCounters {
    pub fn totals(&self) -> (PhaseCount, PhaseCount, u64) {
        self.per_query.iter().fold((PhaseCount::default(), PhaseCount::default(), 0), |(s, g, i), q| {
            (
                PhaseCount { samples: s.samples + q.seed.samples, sims: s.sims + q.seed.sims },
                PhaseCount { samples: g.samples + q.group.samples, sims: g.sims + q.group.sims },
                i + q.initial_sims,
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub algorithm: Algorithm,
    pub group_size: usize,
    pub max_turns: usize,
    pub queries_audited: usize,
    pub expected_seed: u64,
    pub expected_group: u64,
    pub expected_total: u64,
    /// `G·T`, the group-sampling cost alone.
    pub nominal_group_rollouts: u64,
    pub counted_seed: PhaseCount,
    pub counted_group: PhaseCount,
    pub counted_total: PhaseCount,
}

impl BudgetReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str("algorithm        | phase | expected | samples | sims\n");
        out.push_str("-----------------+-------+----------+---------+-----\n");
        let rows = [
            ("seed", self.expected_seed, self.counted_seed),
            ("group", self.expected_group, self.counted_group),
            ("total", self.expected_total, self.counted_total),
        ];
        for (phase, expected, counted) in rows {
            out.push_str(&format!(
                "{:<16} | {:<5} | {:>8} | {:>7} | {:>4}\n",
                self.algorithm.label(),
                phase,
                expected,
                counted.samples,
                counted.sims
            ));
        }
        out.push_str(&format!(
            "per query; G x T = {} (group sampling only), initial-point simulations excluded\n",
            self.nominal_group_rollouts
        ));
        out
    }
}

/// Checks every query visit against the closed-form rollout cost.
pub fn budget_audit(counters: &BudgetCounters, cfg: &TrainConfig) -> Result<BudgetReport, RlError> {
    let g = cfg.group_size as u64;
    let t = cfg.max_turns as u64;
    let (expected_seed, expected_group) = match cfg.algorithm {
        Algorithm::TlGrpo => (t, g * t),
        Algorithm::TrajGrpo => (0, g * t),
        Algorithm::SingleTurnGrpo => (0, g),
    };
    let fail = |phase: &str, q: &QueryBudget, expected: u64, counted: u64| RlError::Audit {
        phase: phase.to_string(),
        query_id: q.query_id.clone(),
        expected,
        counted,
    };
    for q in &counters.per_query {
        for (phase, expected, count) in [("seed", expected_seed, q.seed), ("group", expected_group, q.group)] {
            if count.samples != expected {
                return Err(fail(&format!("{phase} samples"), q, expected, count.samples));
            }
            if count.sims != expected {
                return Err(fail(&format!("{phase} simulations"), q, expected, count.sims));
            }
        }
        if q.initial_sims != 1 {
            return Err(fail("initial simulations", q, 1, q.initial_sims));
        }
    }
    let per = |total: u64| total / counters.per_query.len().max(1) as u64;
    let (seed, group, _) = counters.totals();
    Ok(BudgetReport {
        algorithm: cfg.algorithm,
        group_size: cfg.group_size,
        max_turns: cfg.max_turns,
        queries_audited: counters.per_query.len(),
        expected_seed,
        expected_group,
        expected_total: expected_seed + expected_group,
        nominal_group_rollouts: g * t,
        counted_seed: PhaseCount { samples: per(seed.samples), sims: per(seed.sims) },
        counted_group: PhaseCount { samples: per(group.samples), sims: per(group.sims) },
        counted_total: PhaseCount { samples: per(seed.samples + group.samples), sims: per(seed.sims + group.sims) },
    })
}
