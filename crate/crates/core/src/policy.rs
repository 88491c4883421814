//! Factored softmax policy over multiplicative parameter adjustments.
//!
//! Every design parameter `i` picks one multiplier `m_i` from [`MULTIPLIERS`]
//! with probability `softmax(W·φ_i / temperature)`. `W` is one `K × F` matrix
//! shared by every parameter and every task, so `φ_i` carries everything that
//! distinguishes parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::PolicyError;
use crate::surrogate::{Bound, Observation, QueryInstance, TaskDefinition};

pub const MULTIPLIERS: [f64; 5] = [0.5, 0.8, 1.0, 1.25, 2.0];
pub const NUM_ACTIONS: usize = MULTIPLIERS.len();
/// Objective score slots in the feature vector; extra objectives are dropped.
pub const MAX_OBJECTIVE_SLOTS: usize = 8;
pub const CHECKPOINT_VERSION: u32 = 1;

const DEFAULT_BETA1: f64 = 0.9;
const DEFAULT_BETA2: f64 = 0.999;
const DEFAULT_EPS: f64 = 1e-8;

/// Names of the per-parameter features, in order.
pub fn feature_names() -> Vec<String> {
    let mut names: Vec<String> = ["bias", "value", "log_position", "log_position_x_shortfall"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..MAX_OBJECTIVE_SLOTS).map(|j| format!("score_{j}")));
    names.extend(["latest_reward", "best_reward", "reward_delta", "turn_fraction"].map(String::from));
    names.extend(MULTIPLIERS.iter().map(|m| format!("prev_mult_{m}")));
    names.extend(MULTIPLIERS.iter().map(|m| format!("prev_mult_{m}_x_improved")));
    names
}

pub fn feature_dim() -> usize {
    4 + MAX_OBJECTIVE_SLOTS + 4 + 2 * NUM_ACTIONS
}

/// Identifies the feature layout and action set a weight matrix was trained on.
pub fn feature_schema_hash() -> String {
    let mut h = Sha256::new();
    for name in feature_names() {
        h.update(name.as_bytes());
        h.update([0u8]);
    }
    for m in MULTIPLIERS {
        h.update(m.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// One element of a history: the initial point (no choices) or a policy turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub params: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<usize>>,
    pub observation: Observation,
    pub reward: f64,
}

/// `(o_0, a_0, o_1, …, o_t)`: entry 0 is always the simulated initial point.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub entries: Vec<HistoryEntry>,
}

impl History {
    pub fn new(initial: HistoryEntry) -> Self {
        History { entries: vec![initial] }
    }

    /// Number of policy turns taken so far.
    pub fn turn(&self) -> usize {
        self.entries.len().saturating_sub(1)
    }

    pub fn latest(&self) -> &HistoryEntry {
        self.entries.last().expect("history holds at least the initial point")
    }

    pub fn push(&mut self, entry: HistoryEntry) {
        self.entries.push(entry);
    }

    /// Params the next multipliers apply to: the latest valid design.
    pub fn current_params(&self) -> &[f64] {
        self.entries
            .iter()
            .rev()
            .find(|e| e.observation.valid)
            .unwrap_or_else(|| self.latest())
            .params
            .as_slice()
    }

    pub fn best_reward(&self) -> f64 {
        self.entries.iter().map(|e| e.reward).fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// Full history conditioning.
    #[default]
    MultiTurn,
    /// Original query plus the most recent observation only.
    StIter { include_best: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryFeatures {
    pub dim: usize,
    pub feature_dim: usize,
    /// Row-major `dim × feature_dim`.
    pub data: Vec<f64>,
}

impl HistoryFeatures {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.feature_dim..(i + 1) * self.feature_dim]
    }
}

struct Summary {
    scores: Vec<f64>,
    latest: f64,
    best: f64,
    delta: f64,
    turn_fraction: f64,
    prev_choices: Option<Vec<usize>>,
}

fn objective_scores(entry: &HistoryEntry, query: &QueryInstance) -> Vec<f64> {
    let n = query.specs.len().min(MAX_OBJECTIVE_SLOTS);
    match &entry.observation.metrics {
        Some(metrics) if entry.observation.valid => match query.specs.score(metrics) {
            Ok(b) => b.per_objective.iter().take(n).map(|(_, p)| *p).collect(),
            Err(_) => vec![0.0; n],
        },
        _ => vec![0.0; n],
    }
}

fn unit(v: f64) -> f64 {
    if v.is_finite() {
        v.clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

/// Builds `φ_i(h_t)` for every parameter. Every feature lies in `[−1, 1]`.
pub fn featurize(history: &History, query: &QueryInstance, task: &TaskDefinition, mode: FeatureMode) -> HistoryFeatures {
    let latest = history.latest();
    let summary = match mode {
        FeatureMode::MultiTurn => {
            let t = history.turn();
            let previous = t.checked_sub(1).map(|k| history.entries[k].reward);
            Summary {
                scores: objective_scores(latest, query),
                latest: latest.reward,
                best: history.best_reward(),
                delta: previous.map_or(0.0, |p| latest.reward - p),
                turn_fraction: t as f64 / query.max_turns.max(1) as f64,
                prev_choices: latest.choices.clone(),
            }
        }
        FeatureMode::StIter { include_best } => Summary {
            scores: objective_scores(latest, query),
            latest: latest.reward,
            best: if include_best { history.best_reward() } else { latest.reward },
            delta: 0.0,
            turn_fraction: 0.0,
            prev_choices: None,
        },
    };
    let current = match mode {
        FeatureMode::MultiTurn => history.current_params(),
        FeatureMode::StIter { .. } => latest.params.as_slice(),
    };
    build_features(current, &task.bounds, &summary)
}

fn build_features(current: &[f64], bounds: &[Bound], s: &Summary) -> HistoryFeatures {
    let f = feature_dim();
    let improved = if s.delta > 1e-12 {
        1.0
    } else if s.delta < -1e-12 {
        -1.0
    } else {
        0.0
    };
    let mut data = Vec::with_capacity(current.len() * f);
    for (i, (&w, b)) in current.iter().zip(bounds).enumerate() {
        let log_pos = 2.0 * (w / b.lo).ln() / (b.hi / b.lo).ln() - 1.0;
        data.push(1.0);
        data.push(unit(2.0 * b.normalize(w) - 1.0));
        data.push(unit(log_pos));
        data.push(unit(log_pos * (1.0 - s.latest)));
        for j in 0..MAX_OBJECTIVE_SLOTS {
            data.push(unit(s.scores.get(j).copied().unwrap_or(0.0)));
        }
        data.push(unit(s.latest));
        data.push(unit(s.best));
        data.push(unit(s.delta));
        data.push(unit(s.turn_fraction));
        let prev = s.prev_choices.as_ref().and_then(|c| c.get(i).copied());
        for k in 0..NUM_ACTIONS {
            data.push(if prev == Some(k) { 1.0 } else { 0.0 });
        }
        for k in 0..NUM_ACTIONS {
            data.push(if prev == Some(k) { improved } else { 0.0 });
        }
    }
    HistoryFeatures { dim: current.len(), feature_dim: f, data }
}

/// The weight matrix `W` of the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParameters {
    pub num_actions: usize,
    pub feature_dim: usize,
    /// Row-major `num_actions × feature_dim`.
    pub weights: Vec<f64>,
    pub version: u64,
}

impl PolicyParameters {
    pub fn zeros() -> Self {
        Self::zeros_with(NUM_ACTIONS, feature_dim())
    }

    pub fn zeros_with(num_actions: usize, feature_dim: usize) -> Self {
        PolicyParameters { num_actions, feature_dim, weights: vec![0.0; num_actions * feature_dim], version: 0 }
    }

    fn check(&self, features: &HistoryFeatures) -> Result<(), PolicyError> {
        if self.weights.len() != self.num_actions * self.feature_dim {
            return Err(PolicyError::ShapeMismatch {
                expected: (self.num_actions, self.feature_dim),
                got: (self.weights.len() / self.feature_dim.max(1), self.feature_dim),
            });
        }
        if features.feature_dim != self.feature_dim {
            return Err(PolicyError::ShapeMismatch {
                expected: (self.num_actions, self.feature_dim),
                got: (self.num_actions, features.feature_dim),
            });
        }
        Ok(())
    }

    fn row_log_probs(&self, phi: &[f64], temperature: f64) -> Vec<f64> {
        let logits: Vec<f64> = self
            .weights
            .chunks(self.feature_dim)
            .map(|w| w.iter().zip(phi).map(|(a, b)| a * b).sum::<f64>() / temperature)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        logits.iter().map(|l| l - lse).collect()
    }
}

fn check_temperature(temperature: f64) -> Result<(), PolicyError> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(PolicyError::InvalidConfig(format!("temperature must be > 0, got {temperature}")))
    }
}

fn check_choices(params: &PolicyParameters, features: &HistoryFeatures, choices: &[usize]) -> Result<(), PolicyError> {
    if choices.len() != features.dim {
        return Err(PolicyError::ShapeMismatch { expected: (features.dim, 1), got: (choices.len(), 1) });
    }
    if let Some(&choice) = choices.iter().find(|&&c| c >= params.num_actions) {
        return Err(PolicyError::ChoiceOutOfRange { choice, num_choices: params.num_actions });
    }
    Ok(())
}

/// Per-parameter categorical distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub probs: Vec<Vec<f64>>,
}

pub fn action_distribution(
    params: &PolicyParameters,
    features: &HistoryFeatures,
    temperature: f64,
) -> Result<ActionDistribution, PolicyError> {
    check_temperature(temperature)?;
    params.check(features)?;
    let probs = (0..features.dim)
        .map(|i| params.row_log_probs(features.row(i), temperature).into_iter().map(f64::exp).collect())
        .collect();
    Ok(ActionDistribution { probs })
}

/// Choice indices plus the design they produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactoredAction {
    pub choices: Vec<usize>,
    pub params: Vec<f64>,
}

impl FactoredAction {
    /// Applies the chosen multipliers to `current` and clamps into bounds.
    pub fn realize(choices: Vec<usize>, current: &[f64], bounds: &[Bound]) -> FactoredAction {
        let params = choices
            .iter()
            .zip(current)
            .zip(bounds)
            .map(|((&c, &w), b)| b.clamp(w * MULTIPLIERS[c]))
            .collect();
        FactoredAction { choices, params }
    }
}

/// Nucleus over one categorical: indices in descending probability order
/// (ties by index) until the mass reaches `top_p`.
fn nucleus(probs: &[f64], top_p: f64) -> (Vec<usize>, f64) {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut kept = Vec::new();
    for k in order {
        kept.push(k);
        mass += probs[k];
        if mass >= top_p - 1e-12 {
            break;
        }
    }
    (kept, mass)
}

/// Samples choice indices with per-parameter nucleus truncation. The
/// returned log-probability is that of the truncated, renormalized draw.
pub fn sample_choices(dist: &ActionDistribution, rng: &mut impl Rng, top_p: f64) -> Result<(Vec<usize>, f64), PolicyError> {
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(PolicyError::InvalidConfig(format!("top_p must be in (0, 1], got {top_p}")));
    }
    let mut log_prob = 0.0;
    let mut choices = Vec::with_capacity(dist.probs.len());
    for probs in &dist.probs {
        let (kept, mass) = nucleus(probs, top_p);
        let u: f64 = rng.gen::<f64>() * mass;
        let mut acc = 0.0;
        let mut pick = *kept.last().expect("nucleus is never empty");
        for &k in &kept {
            acc += probs[k];
            if u < acc {
                pick = k;
                break;
            }
        }
        log_prob += (probs[pick] / mass).ln();
        choices.push(pick);
    }
    Ok((choices, log_prob))
}

pub fn sample_action(
    dist: &ActionDistribution,
    rng: &mut impl Rng,
    top_p: f64,
    current: &[f64],
    bounds: &[Bound],
) -> Result<(FactoredAction, f64), PolicyError> {
    let (choices, log_prob) = sample_choices(dist, rng, top_p)?;
    Ok((FactoredAction::realize(choices, current, bounds), log_prob))
}

/// `ln π(m_i | φ_i)` for every parameter under the full softmax.
pub fn component_log_probs(
    params: &PolicyParameters,
    features: &HistoryFeatures,
    choices: &[usize],
    temperature: f64,
) -> Result<Vec<f64>, PolicyError> {
    check_temperature(temperature)?;
    params.check(features)?;
    check_choices(params, features, choices)?;
    Ok(choices
        .iter()
        .enumerate()
        .map(|(i, &m)| params.row_log_probs(features.row(i), temperature)[m])
        .collect())
}

/// Whole-action log-density under the full (untruncated) softmax.
pub fn log_prob(
    params: &PolicyParameters,
    features: &HistoryFeatures,
    choices: &[usize],
    temperature: f64,
) -> Result<f64, PolicyError> {
    Ok(component_log_probs(params, features, choices, temperature)?.iter().sum())
}

/// `∇_W ln π(m_i | φ_i) = (onehot(m_i) − p_i) ⊗ φ_i / temperature`, one matrix per parameter.
pub fn component_grads(
    params: &PolicyParameters,
    features: &HistoryFeatures,
    choices: &[usize],
    temperature: f64,
) -> Result<Vec<Vec<f64>>, PolicyError> {
    check_temperature(temperature)?;
    params.check(features)?;
    check_choices(params, features, choices)?;
    let f = params.feature_dim;
    Ok(choices
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let phi = features.row(i);
            let lp = params.row_log_probs(phi, temperature);
            let mut g = vec![0.0; params.weights.len()];
            for (k, l) in lp.iter().enumerate() {
                let coef = (if k == m { 1.0 } else { 0.0 } - l.exp()) / temperature;
                for (gj, x) in g[k * f..(k + 1) * f].iter_mut().zip(phi) {
                    *gj = coef * x;
                }
            }
            g
        })
        .collect())
}

pub fn grad_log_prob(
    params: &PolicyParameters,
    features: &HistoryFeatures,
    choices: &[usize],
    temperature: f64,
) -> Result<Vec<f64>, PolicyError> {
    let mut total = vec![0.0; params.weights.len()];
    for g in component_grads(params, features, choices, temperature)? {
        for (t, x) in total.iter_mut().zip(g) {
            *t += x;
        }
    }
    Ok(total)
}

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(size: usize, lr: f64) -> Self {
        OptimizerState {
            m: vec![0.0; size],
            v: vec![0.0; size],
            step: 0,
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
        }
    }
}

/// One bias-corrected Adam step along `gradient` (ascent: the objective's gradient is followed uphill).
pub fn apply_update(params: &mut PolicyParameters, gradient: &[f64], opt: &mut OptimizerState) -> Result<(), PolicyError> {
    let n = params.weights.len();
    if gradient.len() != n || opt.m.len() != n || opt.v.len() != n {
        return Err(PolicyError::ShapeMismatch { expected: (n, 1), got: (gradient.len().min(opt.m.len()), 1) });
    }
    opt.step += 1;
    let c1 = 1.0 - opt.beta1.powi(opt.step as i32);
    let c2 = 1.0 - opt.beta2.powi(opt.step as i32);
    for j in 0..n {
        let g = gradient[j];
        opt.m[j] = opt.beta1 * opt.m[j] + (1.0 - opt.beta1) * g;
        opt.v[j] = opt.beta2 * opt.v[j] + (1.0 - opt.beta2) * g * g;
        let m_hat = opt.m[j] / c1;
        let v_hat = opt.v[j] / c2;
        params.weights[j] += opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
    }
    params.version += 1;
    Ok(())
}

/// Saved policy, optimizer state and feature layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub feature_schema: String,
    pub multipliers: Vec<f64>,
    pub iteration: usize,
    pub policy: PolicyParameters,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn new(iteration: usize, policy: PolicyParameters, optimizer: OptimizerState) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            feature_schema: feature_schema_hash(),
            multipliers: MULTIPLIERS.to_vec(),
            iteration,
            policy,
            optimizer,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(PolicyError::Checkpoint(format!("unsupported format version {}", ckpt.format_version)));
        }
        let expected = feature_schema_hash();
        if ckpt.feature_schema != expected {
            return Err(PolicyError::SchemaMismatch { expected, found: ckpt.feature_schema });
        }
        if ckpt.policy.weights.len() != ckpt.policy.num_actions * ckpt.policy.feature_dim
            || ckpt.policy.feature_dim != feature_dim()
            || ckpt.policy.weights.iter().any(|w| !w.is_finite())
        {
            return Err(PolicyError::Checkpoint("weight matrix has the wrong shape or non-finite entries".into()));
        }
        Ok(ckpt)
    }

    /// sha256 of the serialized checkpoint.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}
