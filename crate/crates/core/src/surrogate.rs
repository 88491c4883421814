//! Deterministic surrogate circuit simulator and the single-state environment.
//!
//! Each metric is a smooth function of the positive parameter vector `w`:
//!
//! ```text
//! m_k(w) = c_k + Σ_i α_ki ln(w_i/lo_i) − Σ_i β_ki (w_i − μ_ki)² + Σ_(i,j) γ_k,ij ln(w_i/lo_i) ln(w_j/lo_j)
//! ```
//!
//! The log terms give diminishing returns, the bowls give interior optima and
//! the couplings model device interaction. `gain` and `pw` both grow with the
//! widths, so the lower bound on one conflicts with the upper bound on the other.
//! Targets are calibrated around a construction point so that it always meets
//! every specification.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::EnvError;
use crate::rng::{lane_rng, str_key, LaneRng};
use crate::spec_score::{
    self, default_thresholds, MetricVector, Objective, RewardMode, SpecKind, SpecSet, DEFAULT_ALPHA, DEFAULT_BETA,
};

pub const DEFAULT_LOWER_BOUND: f64 = 0.4;
pub const DEFAULT_UPPER_BOUND: f64 = 2.0;
pub const MIN_DIM: usize = 2;
pub const MAX_DIM: usize = 40;
const MAX_BUILD_ATTEMPTS: u64 = 16;
const CALIBRATION_SAMPLES: usize = 256;
/// Tolerance band width as a multiple of the median metric deviation over the box.
const TOLERANCE_SPREAD_RATIO: f64 = 0.3;
/// Slack of the construction point inside each target, in tolerance bands.
const CONSTRUCTION_MARGIN: f64 = 0.05;

/// A proposed design `x_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionVector(pub Vec<f64>);

impl ActionVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for ActionVector {
    fn from(v: Vec<f64>) -> Self {
        ActionVector(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub lo: f64,
    pub hi: f64,
}

impl Bound {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    /// `(v − lo) / (hi − lo)`
    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }

    pub fn denormalize(&self, u: f64) -> f64 {
        self.lo + u * (self.hi - self.lo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricModel {
    pub name: String,
    pub offset: f64,
    pub log_weights: Vec<f64>,
    pub bowl_centers: Vec<f64>,
    pub bowl_weights: Vec<f64>,
    pub couplings: Vec<Coupling>,
}

impl MetricModel {
    fn shape(&self, bounds: &[Bound], w: &[f64]) -> f64 {
        let logs: Vec<f64> = w.iter().zip(bounds).map(|(&x, b)| (x / b.lo).ln()).collect();
        let linear: f64 = self.log_weights.iter().zip(&logs).map(|(a, l)| a * l).sum();
        let bowl: f64 = self
            .bowl_weights
            .iter()
            .zip(&self.bowl_centers)
            .zip(w)
            .map(|((b, mu), x)| b * (x - mu) * (x - mu))
            .sum();
        let coupled: f64 = self.couplings.iter().map(|c| c.weight * logs[c.i] * logs[c.j]).sum();
        linear - bowl + coupled
    }

    pub fn evaluate(&self, bounds: &[Bound], w: &[f64]) -> f64 {
        self.offset + self.shape(bounds, w)
    }
}

/// One sizing problem: a design space plus a deterministic metric model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDefinition {
    pub task_id: String,
    pub seed: u64,
    pub dim: usize,
    pub bounds: Vec<Bound>,
    pub metrics: Vec<MetricModel>,
    pub base_specs: SpecSet,
    /// Construction point that meets every base spec.
    pub feasible_point: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionValidity {
    Ok,
    OutOfBounds(Vec<usize>),
    Malformed,
}

impl ActionValidity {
    pub fn is_ok(&self) -> bool {
        matches!(self, ActionValidity::Ok)
    }

    fn reason(&self) -> Option<String> {
        match self {
            ActionValidity::Ok => None,
            ActionValidity::OutOfBounds(idx) => Some(format!("out of bounds at {idx:?}")),
            ActionValidity::Malformed => Some("malformed action".to_string()),
        }
    }
}

#[derive(Clone, Copy)]
enum Role {
    Gain,
    Power,
    Bandwidth,
    PhaseMargin,
}

const ROLES: [Role; 4] = [Role::Gain, Role::Power, Role::Bandwidth, Role::PhaseMargin];

impl Role {
    fn base_name(self) -> &'static str {
        match self {
            Role::Gain => "gain",
            Role::Power => "pw",
            Role::Bandwidth => "gbw",
            Role::PhaseMargin => "pm",
        }
    }

    fn unit(self) -> &'static str {
        match self {
            Role::Gain => "dB",
            Role::Power => "uW",
            Role::Bandwidth => "MHz",
            Role::PhaseMargin => "deg",
        }
    }

    fn is_upper(self) -> bool {
        matches!(self, Role::Power)
    }

    /// (log-weight range, bowl strength)
    fn coefficients(self) -> ((f64, f64), f64) {
        match self {
            Role::Gain => ((0.5, 1.5), 0.3),
            Role::Power => ((0.5, 1.5), 0.0),
            Role::Bandwidth => ((0.0, 0.5), 3.0),
            Role::PhaseMargin => ((-1.0, -0.2), 1.0),
        }
    }
}

pub fn build_task(seed: u64, dim: usize, num_objectives: usize) -> Result<TaskDefinition, EnvError> {
    build_named_task(format!("task-s{seed}-d{dim}-m{num_objectives}"), seed, dim, num_objectives)
}

pub fn build_named_task(
    task_id: impl Into<String>,
    seed: u64,
    dim: usize,
    num_objectives: usize,
) -> Result<TaskDefinition, EnvError> {
    let task_id = task_id.into();
    if !(MIN_DIM..=MAX_DIM).contains(&dim) {
        return Err(EnvError::InvalidTask(format!("dim {dim} outside [{MIN_DIM}, {MAX_DIM}]")));
    }
    if num_objectives < 2 {
        return Err(EnvError::InvalidTask(format!("need at least 2 objectives, got {num_objectives}")));
    }
    let mut last_reason = String::new();
    for attempt in 0..MAX_BUILD_ATTEMPTS {
        let mut rng = lane_rng(seed, &[attempt]);
        match construct(&task_id, seed, dim, num_objectives, &mut rng) {
            Ok(task) => return Ok(task),
            Err(reason) => last_reason = reason,
        }
    }
    Err(EnvError::Construction { attempts: MAX_BUILD_ATTEMPTS as usize, reason: last_reason })
}

fn construct(task_id: &str, seed: u64, dim: usize, m: usize, rng: &mut LaneRng) -> Result<TaskDefinition, String> {
    let bounds = vec![Bound { lo: DEFAULT_LOWER_BOUND, hi: DEFAULT_UPPER_BOUND }; dim];
    let feasible_point: Vec<f64> = bounds
        .iter()
        .map(|b| b.lo * ((b.hi / b.lo).ln() * rng.gen_range(0.3..0.7)).exp())
        .collect();

    let calibration: Vec<Vec<f64>> = (0..CALIBRATION_SAMPLES)
        .map(|_| bounds.iter().map(|b| rng.gen_range(b.lo..=b.hi)).collect())
        .collect();

    let mut metrics = Vec::with_capacity(m);
    let mut objectives = Vec::with_capacity(m);
    for k in 0..m {
        let role = ROLES[k % ROLES.len()];
        let name = match k / ROLES.len() {
            0 => role.base_name().to_string(),
            rep => format!("{}{}", role.base_name(), rep + 1),
        };
        let ((a_lo, a_hi), bowl) = role.coefficients();
        let log_weights: Vec<f64> = (0..dim).map(|_| rng.gen_range(a_lo..a_hi)).collect();
        let bowl_weights: Vec<f64> = bounds
            .iter()
            .map(|b| bowl * rng.gen_range(0.5..1.5) / ((b.hi - b.lo) * (b.hi - b.lo)))
            .collect();
        let num_pairs = (dim - 1).min(3);
        let couplings = (0..num_pairs)
            .map(|_| {
                let i = rng.gen_range(0..dim);
                let j = (i + rng.gen_range(1..dim)) % dim;
                Coupling { i: i.min(j), j: i.max(j), weight: rng.gen_range(-0.3..0.3) }
            })
            .collect();
        let mut model = MetricModel {
            name: name.clone(),
            offset: 0.0,
            log_weights,
            bowl_centers: feasible_point.clone(),
            bowl_weights,
            couplings,
        };

        let at_point = model.shape(&bounds, &feasible_point);
        let mut deviations: Vec<f64> = calibration
            .iter()
            .map(|w| (model.shape(&bounds, w) - at_point).abs())
            .collect();
        deviations.sort_by(f64::total_cmp);
        let spread = deviations[deviations.len() / 2];
        if !(spread.is_finite() && spread > 1e-9) {
            return Err(format!("metric `{name}` is flat over the design box"));
        }
        let tau = TOLERANCE_SPREAD_RATIO * spread;
        let target = if role.is_upper() { tau / DEFAULT_BETA } else { tau / DEFAULT_ALPHA };
        let (kind, value_at_point) = if role.is_upper() {
            (SpecKind::UpperBound { target }, target - CONSTRUCTION_MARGIN * tau)
        } else {
            (SpecKind::LowerBound { target }, target + CONSTRUCTION_MARGIN * tau)
        };
        model.offset = value_at_point - at_point;
        metrics.push(model);
        objectives.push(Objective::with_default_thresholds(name, kind, role.unit()));
    }

    let base_specs = SpecSet::new(objectives).map_err(|e| e.to_string())?;
    let task = TaskDefinition {
        task_id: task_id.to_string(),
        seed,
        dim,
        bounds,
        metrics,
        base_specs,
        feasible_point,
    };
    task.check_construction()?;
    Ok(task)
}

impl TaskDefinition {
    /// One-parameter, one-objective bowl used to sanity-check black-box baselines.
    pub fn single_bowl_1d() -> TaskDefinition {
        let bounds = vec![Bound { lo: DEFAULT_LOWER_BOUND, hi: DEFAULT_UPPER_BOUND }];
        let model = MetricModel {
            name: "gain".into(),
            offset: 10.0,
            log_weights: vec![0.0],
            bowl_centers: vec![1.3],
            bowl_weights: vec![10.0],
            couplings: vec![],
        };
        let spec = Objective::with_default_thresholds("gain", SpecKind::LowerBound { target: 9.5 }, "dB");
        TaskDefinition {
            task_id: "single-bowl-1d".into(),
            seed: 0,
            dim: 1,
            bounds,
            metrics: vec![model],
            base_specs: SpecSet::new(vec![spec]).expect("static spec"),
            feasible_point: vec![1.3],
        }
    }

    pub fn num_objectives(&self) -> usize {
        self.metrics.len()
    }

    pub fn param_name(index: usize) -> String {
        format!("w{}", index + 1)
    }

    /// Structural checks for tasks loaded from disk.
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: String| Err(EnvError::InvalidTask(format!("{}: {msg}", self.task_id)));
        if self.dim == 0 || self.dim > MAX_DIM || self.bounds.len() != self.dim || self.feasible_point.len() != self.dim {
            return bad(format!("inconsistent dimension {}", self.dim));
        }
        if let Some(b) = self.bounds.iter().find(|b| !(b.lo > 0.0 && b.lo < b.hi && b.hi.is_finite())) {
            return bad(format!("invalid bound [{}, {}]", b.lo, b.hi));
        }
        for model in &self.metrics {
            let sizes = [model.log_weights.len(), model.bowl_centers.len(), model.bowl_weights.len()];
            if sizes.iter().any(|&n| n != self.dim) {
                return bad(format!("metric `{}` has coefficient vectors of the wrong length", model.name));
            }
            if model.couplings.iter().any(|c| c.i >= self.dim || c.j >= self.dim) {
                return bad(format!("metric `{}` couples a missing parameter", model.name));
            }
        }
        for obj in self.base_specs.objectives() {
            if !self.metrics.iter().any(|m| m.name == obj.name) {
                return bad(format!("spec `{}` has no metric model", obj.name));
            }
        }
        Ok(())
    }

    fn check_construction(&self) -> Result<(), String> {
        let metrics = self.simulate(&ActionVector(self.feasible_point.clone())).map_err(|e| e.to_string())?;
        let breakdown = self.base_specs.score(&metrics).map_err(|e| e.to_string())?;
        if let Some((name, p)) = breakdown.per_objective.iter().find(|(_, p)| *p < 0.9) {
            return Err(format!("construction point scores {p} on `{name}`"));
        }
        let conflicting = self.base_specs.objectives().iter().any(|up| {
            matches!(up.kind, SpecKind::UpperBound { .. })
                && self.base_specs.objectives().iter().any(|low| {
                    matches!(low.kind, SpecKind::LowerBound { .. }) && self.increase_together(&up.name, &low.name)
                })
        });
        if !conflicting {
            return Err("no conflicting lower/upper objective pair".into());
        }
        Ok(())
    }

    /// True when some parameter raises both metrics under a small increase
    /// from the construction point.
    fn increase_together(&self, a: &str, b: &str) -> bool {
        let (Some(ma), Some(mb)) = (
            self.metrics.iter().find(|m| m.name == a),
            self.metrics.iter().find(|m| m.name == b),
        ) else {
            return false;
        };
        let base = &self.feasible_point;
        (0..self.dim).any(|i| {
            let mut up = base.clone();
            up[i] = self.bounds[i].clamp(up[i] * 1.05);
            ma.evaluate(&self.bounds, &up) > ma.evaluate(&self.bounds, base)
                && mb.evaluate(&self.bounds, &up) > mb.evaluate(&self.bounds, base)
        })
    }

    pub fn validate_action(&self, params: &ActionVector) -> ActionValidity {
        if params.len() != self.dim || params.0.iter().any(|v| !v.is_finite()) {
            return ActionValidity::Malformed;
        }
        let outside: Vec<usize> = params
            .0
            .iter()
            .zip(&self.bounds)
            .enumerate()
            .filter(|(_, (v, b))| !b.contains(**v))
            .map(|(i, _)| i)
            .collect();
        if outside.is_empty() {
            ActionValidity::Ok
        } else {
            ActionValidity::OutOfBounds(outside)
        }
    }

    /// Evaluates every metric at `params`. Never clamps.
    pub fn simulate(&self, params: &ActionVector) -> Result<MetricVector, EnvError> {
        if params.len() != self.dim {
            return Err(EnvError::DimensionMismatch { expected: self.dim, got: params.len() });
        }
        for (index, (&value, b)) in params.0.iter().zip(&self.bounds).enumerate() {
            if !value.is_finite() || !b.contains(value) {
                return Err(EnvError::OutOfBounds { index, value, lo: b.lo, hi: b.hi });
            }
        }
        Ok(self
            .metrics
            .iter()
            .map(|m| (m.name.clone(), m.evaluate(&self.bounds, &params.0)))
            .collect())
    }

    pub fn sample_uniform_point(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.bounds.iter().map(|b| rng.gen_range(b.lo..=b.hi)).collect()
    }
}

/// One synthesized optimization problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryInstance {
    pub query_id: String,
    pub task_id: String,
    pub initial_params: Vec<f64>,
    pub specs: SpecSet,
    pub max_turns: usize,
}

/// Randomizes initial points and applies multiplicative target offsets.
pub fn synthesize_queries(
    task: &TaskDefinition,
    n: usize,
    seed: u64,
    offset_scale: f64,
    max_turns: usize,
) -> Result<Vec<QueryInstance>, EnvError> {
    if !(0.0..1.0).contains(&offset_scale) {
        return Err(EnvError::InvalidTask(format!("offset_scale {offset_scale} outside [0, 1)")));
    }
    if max_turns == 0 {
        return Err(EnvError::InvalidTask("max_turns must be >= 1".into()));
    }
    (0..n)
        .map(|index| {
            let mut rng = lane_rng(seed, &[str_key(&task.task_id), index as u64]);
            let initial_params = task.sample_uniform_point(&mut rng);
            let objectives = task
                .base_specs
                .objectives()
                .iter()
                .map(|obj| {
                    let factor = if offset_scale > 0.0 {
                        rng.gen_range(1.0 - offset_scale..=1.0 + offset_scale)
                    } else {
                        1.0
                    };
                    let kind = obj.kind.scaled(factor);
                    let (tau_lower, tau_upper) = default_thresholds(&kind, DEFAULT_ALPHA, DEFAULT_BETA);
                    Objective { name: obj.name.clone(), kind, tau_lower, tau_upper, unit: obj.unit.clone() }
                })
                .collect();
            Ok(QueryInstance {
                query_id: format!("{}/{seed}/{index:05}", task.task_id),
                task_id: task.task_id.clone(),
                initial_params,
                specs: SpecSet::new(objectives)?,
                max_turns,
            })
        })
        .collect()
}

/// What the agent sees after one simulation (`o_t`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub turn_index: usize,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub violation: Option<String>,
}

/// Where simulations run: in-process or through a remote service.
pub trait SimBackend: Send + Sync {
    fn simulate(&self, task: &TaskDefinition, params: &ActionVector) -> Result<MetricVector, EnvError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LocalSim;

impl SimBackend for LocalSim {
    fn simulate(&self, task: &TaskDefinition, params: &ActionVector) -> Result<MetricVector, EnvError> {
        task.simulate(params)
    }
}

/// Simulates the query's initial point, producing `o_0` and its reward.
pub fn initial_observation(
    backend: &dyn SimBackend,
    query: &QueryInstance,
    task: &TaskDefinition,
) -> Result<(Observation, f64), EnvError> {
    let metrics = backend.simulate(task, &ActionVector(query.initial_params.clone()))?;
    let performance = query.specs.score(&metrics)?.performance;
    Ok((Observation { turn_index: 0, valid: true, metrics: Some(metrics), violation: None }, performance))
}

pub fn step(
    query: &QueryInstance,
    task: &TaskDefinition,
    action: &ActionVector,
    turn: usize,
    mode: RewardMode,
) -> Result<(Observation, f64), EnvError> {
    step_with(&LocalSim, query, task, action, turn, mode)
}

/// One environment turn. The state never changes, so the result depends only
/// on `action`; `turn` is only checked against the budget and recorded.
pub fn step_with(
    backend: &dyn SimBackend,
    query: &QueryInstance,
    task: &TaskDefinition,
    action: &ActionVector,
    turn: usize,
    mode: RewardMode,
) -> Result<(Observation, f64), EnvError> {
    if turn >= query.max_turns {
        return Err(EnvError::BudgetExceeded { turn, max_turns: query.max_turns });
    }
    let validity = task.validate_action(action);
    if !validity.is_ok() {
        let penalty = spec_score::format_penalty(Some(spec_score::FormatViolation::InvalidAction));
        let obs = Observation { turn_index: turn + 1, valid: false, metrics: None, violation: validity.reason() };
        return Ok((obs, spec_score::final_reward(0.0, penalty, mode)));
    }
    let metrics = backend.simulate(task, action)?;
    let performance = query.specs.score(&metrics)?.performance;
    let obs = Observation { turn_index: turn + 1, valid: true, metrics: Some(metrics), violation: None };
    Ok((obs, spec_score::final_reward(performance, 0.0, mode)))
}
