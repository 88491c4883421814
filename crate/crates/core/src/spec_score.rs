//! Multi-objective specification scoring.
//!
//! Every objective is mapped onto `[0, 1]` by a piecewise score with a
//! quadratic lower transition and a cubic upper transition. The per-objective
//! scores are combined with a geometric mean into the performance reward `P`,
//! and the turn reward applies the format penalty in training mode only.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::ScoreError;

/// Default proportionality constant for the lower tolerance band.
pub const DEFAULT_ALPHA: f64 = 0.2;
/// Default proportionality constant for the upper tolerance band.
pub const DEFAULT_BETA: f64 = 0.2;
/// Absolute tolerance used when a target is exactly zero.
pub const ABS_THRESHOLD_FLOOR: f64 = 1e-6;

/// Measured metric values keyed by objective name.
pub type MetricVector = BTreeMap<String, f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpecKind {
    /// `v >= target`
    LowerBound { target: f64 },
    /// `v <= target`
    UpperBound { target: f64 },
    /// `lower <= v <= upper`
    Range { lower: f64, upper: f64 },
}

impl SpecKind {
    pub fn label(&self) -> &'static str {
        match self {
            SpecKind::LowerBound { .. } => "lower",
            SpecKind::UpperBound { .. } => "upper",
            SpecKind::Range { .. } => "range",
        }
    }

    /// Multiplies every target by `factor`, keeping `lower <= upper` for ranges.
    pub fn scaled(&self, factor: f64) -> SpecKind {
        match *self {
            SpecKind::LowerBound { target } => SpecKind::LowerBound { target: target * factor },
            SpecKind::UpperBound { target } => SpecKind::UpperBound { target: target * factor },
            SpecKind::Range { lower, upper } => {
                let (a, b) = (lower * factor, upper * factor);
                SpecKind::Range { lower: a.min(b), upper: a.max(b) }
            }
        }
    }
}

/// Format violations that carry a training-time penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatViolation {
    /// Unparsable or out-of-range proposal.
    InvalidAction,
    /// Attempted a tool call past the turn budget.
    BudgetOverrun,
}

impl FormatViolation {
    pub fn penalty(self) -> f64 {
        match self {
            FormatViolation::InvalidAction => -1.0,
            FormatViolation::BudgetOverrun => -0.5,
        }
    }
}

/// Penalty `F` for an optional violation; well-formed actions get 0.
pub fn format_penalty(violation: Option<FormatViolation>) -> f64 {
    violation.map_or(0.0, FormatViolation::penalty)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub name: String,
    #[serde(flatten)]
    pub kind: SpecKind,
    pub tau_lower: f64,
    pub tau_upper: f64,
    #[serde(default)]
    pub unit: String,
}

impl Objective {
    /// Builds an objective with thresholds proportional to its target(s).
    pub fn with_default_thresholds(name: impl Into<String>, kind: SpecKind, unit: impl Into<String>) -> Self {
        let (tau_lower, tau_upper) = default_thresholds(&kind, DEFAULT_ALPHA, DEFAULT_BETA);
        Objective { name: name.into(), kind, tau_lower, tau_upper, unit: unit.into() }
    }

    pub fn validate(&self) -> Result<(), ScoreError> {
        let finite_target = match self.kind {
            SpecKind::LowerBound { target } | SpecKind::UpperBound { target } => target.is_finite(),
            SpecKind::Range { lower, upper } => {
                if lower > upper {
                    return Err(ScoreError::InvalidSpec(format!(
                        "objective `{}`: range lower {lower} exceeds upper {upper}",
                        self.name
                    )));
                }
                lower.is_finite() && upper.is_finite()
            }
        };
        if !finite_target {
            return Err(ScoreError::InvalidSpec(format!("objective `{}`: non-finite target", self.name)));
        }
        let needs_lower = matches!(self.kind, SpecKind::LowerBound { .. } | SpecKind::Range { .. });
        let needs_upper = matches!(self.kind, SpecKind::UpperBound { .. } | SpecKind::Range { .. });
        if needs_lower && !(self.tau_lower > 0.0 && self.tau_lower.is_finite()) {
            return Err(ScoreError::InvalidSpec(format!("objective `{}`: tau_lower must be > 0", self.name)));
        }
        if needs_upper && !(self.tau_upper > 0.0 && self.tau_upper.is_finite()) {
            return Err(ScoreError::InvalidSpec(format!("objective `{}`: tau_upper must be > 0", self.name)));
        }
        Ok(())
    }

    /// Score `p_j` of a measured value against this objective.
    pub fn score(&self, value: f64) -> Result<f64, ScoreError> {
        match self.kind {
            SpecKind::LowerBound { target } => score_lower(value, target, self.tau_lower),
            SpecKind::UpperBound { target } => score_upper(value, target, self.tau_upper),
            SpecKind::Range { lower, upper } => score_range(value, lower, upper, self.tau_lower, self.tau_upper),
        }
    }
}

/// Ordered, non-empty set of uniquely named objectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecSetRepr", into = "SpecSetRepr")]
pub struct SpecSet {
    objectives: Vec<Objective>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecSetRepr {
    objective: Vec<Objective>,
}

impl TryFrom<SpecSetRepr> for SpecSet {
    type Error = ScoreError;
    fn try_from(repr: SpecSetRepr) -> Result<Self, Self::Error> {
        SpecSet::new(repr.objective)
    }
}

impl From<SpecSet> for SpecSetRepr {
    fn from(set: SpecSet) -> Self {
        SpecSetRepr { objective: set.objectives }
    }
}

impl SpecSet {
    pub fn new(objectives: Vec<Objective>) -> Result<Self, ScoreError> {
        if objectives.is_empty() {
            return Err(ScoreError::InvalidSpec("a spec set needs at least one objective".into()));
        }
        let mut seen = HashSet::new();
        for obj in &objectives {
            obj.validate()?;
            if !seen.insert(obj.name.as_str()) {
                return Err(ScoreError::InvalidSpec(format!("duplicate objective name `{}`", obj.name)));
            }
        }
        Ok(SpecSet { objectives })
    }

    pub fn objectives(&self) -> &[Objective] {
        &self.objectives
    }

    pub fn len(&self) -> usize {
        self.objectives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objectives.is_empty()
    }

    /// Parses the TOML spec-file format (`[[objective]]` tables).
    pub fn from_toml_str(text: &str) -> Result<Self, ScoreError> {
        let file: SpecFile = toml::from_str(text).map_err(|e| ScoreError::Parse(e.to_string()))?;
        let objectives = file
            .objective
            .into_iter()
            .map(SpecRecord::into_objective)
            .collect::<Result<Vec<_>, _>>()?;
        SpecSet::new(objectives)
    }

    pub fn to_toml_string(&self) -> String {
        let file = SpecFile { objective: self.objectives.iter().map(SpecRecord::from_objective).collect() };
        toml::to_string(&file).expect("spec records always serialize")
    }

    pub fn score(&self, metrics: &MetricVector) -> Result<ScoreBreakdown, ScoreError> {
        let per_objective = self
            .objectives
            .iter()
            .map(|obj| {
                let value = *metrics
                    .get(&obj.name)
                    .ok_or_else(|| ScoreError::MissingMetric(obj.name.clone()))?;
                Ok((obj.name.clone(), obj.score(value)?))
            })
            .collect::<Result<Vec<_>, ScoreError>>()?;
        let scores: Vec<f64> = per_objective.iter().map(|(_, p)| *p).collect();
        Ok(ScoreBreakdown { performance: geometric_mean(&scores), per_objective })
    }
}

/// On-disk record for one objective. Thresholds are optional and default to
/// `alpha`/`beta` proportional bands.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecRecord {
    name: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    upper: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tau_lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tau_upper: Option<f64>,
    #[serde(default)]
    unit: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    objective: Vec<SpecRecord>,
}

impl SpecRecord {
    fn into_objective(self) -> Result<Objective, ScoreError> {
        let missing = |field: &str| ScoreError::InvalidSpec(format!("objective `{}`: missing `{field}`", self.name));
        let kind = match self.kind.as_str() {
            "lower" => SpecKind::LowerBound { target: self.target.ok_or_else(|| missing("target"))? },
            "upper" => SpecKind::UpperBound { target: self.target.ok_or_else(|| missing("target"))? },
            "range" => SpecKind::Range {
                lower: self.lower.ok_or_else(|| missing("lower"))?,
                upper: self.upper.ok_or_else(|| missing("upper"))?,
            },
            other => {
                return Err(ScoreError::InvalidSpec(format!(
                    "objective `{}`: unknown kind `{other}` (expected lower, upper or range)",
                    self.name
                )))
            }
        };
        if let SpecKind::Range { lower, upper } = kind {
            if lower > upper {
                return Err(ScoreError::InvalidSpec(format!(
                    "objective `{}`: range lower {lower} exceeds upper {upper}",
                    self.name
                )));
            }
        }
        let (dl, du) = default_thresholds(&kind, DEFAULT_ALPHA, DEFAULT_BETA);
        Ok(Objective {
            name: self.name,
            kind,
            tau_lower: self.tau_lower.unwrap_or(dl),
            tau_upper: self.tau_upper.unwrap_or(du),
            unit: self.unit,
        })
    }

    fn from_objective(obj: &Objective) -> Self {
        let (target, lower, upper) = match obj.kind {
            SpecKind::LowerBound { target } | SpecKind::UpperBound { target } => (Some(target), None, None),
            SpecKind::Range { lower, upper } => (None, Some(lower), Some(upper)),
        };
        SpecRecord {
            name: obj.name.clone(),
            kind: obj.kind.label().to_string(),
            target,
            lower,
            upper,
            tau_lower: Some(obj.tau_lower),
            tau_upper: Some(obj.tau_upper),
            unit: obj.unit.clone(),
        }
    }
}

/// Parses a flat `name = value` TOML metric file.
pub fn metrics_from_toml_str(text: &str) -> Result<MetricVector, ScoreError> {
    let metrics: MetricVector = toml::from_str(text).map_err(|e| ScoreError::Parse(e.to_string()))?;
    if let Some((name, _)) = metrics.iter().find(|(_, v)| !v.is_finite()) {
        return Err(ScoreError::InvalidInput(format!("metric `{name}` is not finite")));
    }
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub per_objective: Vec<(String, f64)>,
    pub performance: f64,
}

impl ScoreBreakdown {
    pub fn reward(&self, penalty: f64, mode: RewardMode) -> f64 {
        final_reward(self.performance, penalty, mode)
    }
}

fn check_finite(values: &[f64]) -> Result<(), ScoreError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ScoreError::InvalidInput(format!("non-finite score input {values:?}")))
    }
}

pub fn score_lower(v: f64, s: f64, tau_l: f64) -> Result<f64, ScoreError> {
    check_finite(&[v, s, tau_l])?;
    if tau_l <= 0.0 {
        return Err(ScoreError::InvalidInput(format!("tau_lower must be > 0, got {tau_l}")));
    }
    let edge = s - tau_l;
    Ok(if v < edge {
        0.0
    } else if v < s {
        let x = ((v - edge) / tau_l).clamp(0.0, 1.0);
        x * x
    } else {
        1.0
    })
}

pub fn score_upper(v: f64, s: f64, tau_u: f64) -> Result<f64, ScoreError> {
    check_finite(&[v, s, tau_u])?;
    if tau_u <= 0.0 {
        return Err(ScoreError::InvalidInput(format!("tau_upper must be > 0, got {tau_u}")));
    }
    let edge = s + tau_u;
    Ok(if v <= s {
        1.0
    } else if v <= edge {
        let x = ((edge - v) / tau_u).clamp(0.0, 1.0);
        x * x * x
    } else {
        0.0
    })
}

pub fn score_range(v: f64, l: f64, u: f64, tau_l: f64, tau_u: f64) -> Result<f64, ScoreError> {
    check_finite(&[v, l, u, tau_l, tau_u])?;
    if l > u {
        return Err(ScoreError::InvalidSpec(format!("range lower {l} exceeds upper {u}")));
    }
    if v < l {
        score_lower(v, l, tau_l)
    } else if v > u {
        score_upper(v, u, tau_u)
    } else {
        Ok(1.0)
    }
}

/// Geometric mean in log space; any zero factor short-circuits to 0.
pub fn geometric_mean(scores: &[f64]) -> f64 {
    if scores.is_empty() || scores.iter().any(|&p| p <= 0.0) {
        return 0.0;
    }
    let mean_log = scores.iter().map(|p| p.ln()).sum::<f64>() / scores.len() as f64;
    mean_log.exp().min(1.0)
}

pub fn performance_reward(metrics: &MetricVector, specs: &SpecSet) -> Result<f64, ScoreError> {
    Ok(specs.score(metrics)?.performance)
}

/// Turn reward `Φ`: clamped `P + F` when training, `P` unchanged in evaluation.
pub fn final_reward(performance: f64, penalty: f64, mode: RewardMode) -> f64 {
    match mode {
        RewardMode::Train => (performance + penalty).clamp(0.0, 1.0),
        RewardMode::Eval => performance,
    }
}

/// Tolerance bands proportional to the target magnitude(s).
pub fn default_thresholds(kind: &SpecKind, alpha: f64, beta: f64) -> (f64, f64) {
    let band = |k: f64, target: f64| {
        let t = k * target.abs();
        if t > 0.0 {
            t
        } else {
            ABS_THRESHOLD_FLOOR
        }
    };
    match *kind {
        SpecKind::LowerBound { target } | SpecKind::UpperBound { target } => (band(alpha, target), band(beta, target)),
        SpecKind::Range { lower, upper } => (band(alpha, lower), band(beta, upper)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lower_bound_examples() {
        let (s, tau) = (10.0, 2.0);
        assert_eq!(score_lower(s, s, tau).unwrap(), 1.0);
        assert!((score_lower(s - tau / 2.0, s, tau).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(score_lower(s - tau, s, tau).unwrap(), 0.0);
        assert_eq!(score_lower(s - 3.0 * tau, s, tau).unwrap(), 0.0);
    }

    #[test]
    fn upper_bound_examples() {
        let (s, tau) = (10.0, 2.0);
        assert_eq!(score_upper(s, s, tau).unwrap(), 1.0);
        assert!((score_upper(s + tau / 2.0, s, tau).unwrap() - 0.125).abs() < 1e-15);
        assert_eq!(score_upper(s + 2.0 * tau, s, tau).unwrap(), 0.0);
    }

    #[test]
    fn range_examples() {
        let (l, u, tl, tu) = (2.0, 6.0, 1.0, 3.0);
        assert_eq!(score_range(4.0, l, u, tl, tu).unwrap(), 1.0);
        assert!((score_range(l - tl / 2.0, l, u, tl, tu).unwrap() - 0.25).abs() < 1e-15);
        assert!((score_range(u + tu / 2.0, l, u, tl, tu).unwrap() - 0.125).abs() < 1e-15);
        assert!(matches!(score_range(1.0, 5.0, 4.0, 1.0, 1.0), Err(ScoreError::InvalidSpec(_))));
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        assert!(matches!(score_lower(f64::NAN, 1.0, 1.0), Err(ScoreError::InvalidInput(_))));
        assert!(matches!(score_upper(1.0, f64::INFINITY, 1.0), Err(ScoreError::InvalidInput(_))));
        assert!(matches!(score_range(1.0, 0.0, 2.0, f64::NAN, 1.0), Err(ScoreError::InvalidInput(_))));
    }

    #[test]
    fn geometric_mean_examples() {
        assert_eq!(geometric_mean(&[1.0; 4]), 1.0);
        assert_eq!(geometric_mean(&[1.0, 0.0, 1.0]), 0.0);
        assert!((geometric_mean(&[0.25, 1.0]) - 0.5).abs() < 1e-15);
        // 200 factors of 1e-3 underflow a direct product but not the log-space mean.
        assert!((geometric_mean(&[1e-3; 200]) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn final_reward_modes() {
        assert_eq!(final_reward(0.8, -1.0, RewardMode::Train), 0.0);
        assert_eq!(final_reward(0.8, -1.0, RewardMode::Eval), 0.8);
        assert_eq!(final_reward(0.3, 0.0, RewardMode::Train), 0.3);
        assert_eq!(format_penalty(Some(FormatViolation::BudgetOverrun)), -0.5);
        assert_eq!(format_penalty(None), 0.0);
    }

    #[test]
    fn threshold_defaults() {
        let (tl, _) = default_thresholds(&SpecKind::LowerBound { target: 79.14 }, 0.2, 0.2);
        assert!((tl - 15.828).abs() < 1e-12);
        let (_, tu) = default_thresholds(&SpecKind::UpperBound { target: 17.77e-6 }, 0.2, 0.2);
        assert!((tu - 3.554e-6).abs() < 1e-18);
        let (tl, tu) = default_thresholds(&SpecKind::LowerBound { target: 0.0 }, 0.2, 0.2);
        assert_eq!((tl, tu), (ABS_THRESHOLD_FLOOR, ABS_THRESHOLD_FLOOR));
        let (tl, tu) = default_thresholds(&SpecKind::Range { lower: 2.0, upper: 10.0 }, 0.1, 0.3);
        assert!((tl - 0.2).abs() < 1e-15 && (tu - 3.0).abs() < 1e-15);
    }

    #[test]
    fn missing_metric_names_objective() {
        let specs = SpecSet::new(vec![Objective::with_default_thresholds(
            "gain",
            SpecKind::LowerBound { target: 1.0 },
            "dB",
        )])
        .unwrap();
        let err = specs.score(&MetricVector::new()).unwrap_err();
        assert!(matches!(err, ScoreError::MissingMetric(ref n) if n == "gain"));
    }

    #[test]
    fn spec_set_rejects_duplicates_and_empty() {
        let obj = Objective::with_default_thresholds("a", SpecKind::UpperBound { target: 1.0 }, "");
        assert!(SpecSet::new(vec![]).is_err());
        assert!(SpecSet::new(vec![obj.clone(), obj]).is_err());
    }

    #[test]
    fn toml_round_trip_keeps_thresholds() {
        let text = r#"
[[objective]]
name = "gain"
kind = "lower"
target = 79.14
unit = "dB"

[[objective]]
name = "vout"
kind = "range"
lower = 0.8
upper = 1.0
tau_upper = 0.05
"#;
        let specs = SpecSet::from_toml_str(text).unwrap();
        assert_eq!(specs.len(), 2);
        assert!((specs.objectives()[0].tau_lower - 15.828).abs() < 1e-12);
        assert_eq!(specs.objectives()[1].tau_upper, 0.05);
        let again = SpecSet::from_toml_str(&specs.to_toml_string()).unwrap();
        assert_eq!(again, specs);
    }

    #[test]
    fn toml_errors_carry_line_numbers() {
        let err = SpecSet::from_toml_str("[[objective]]\nname = \"g\"\nkind = \"lower\"\ntarget = oops\n").unwrap_err();
        assert!(err.to_string().contains("line 4"), "{err}");
        let err = SpecSet::from_toml_str("[[objective]]\nname = \"g\"\nkind = \"sideways\"\ntarget = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("unknown kind"), "{err}");
    }

    proptest! {
        #[test]
        fn scores_are_bounded(v in -1e6f64..1e6, s in -1e3f64..1e3, t1 in 1e-3f64..1e3, t2 in 1e-3f64..1e3, w in 0.0f64..1e3) {
            for p in [
                score_lower(v, s, t1).unwrap(),
                score_upper(v, s, t2).unwrap(),
                score_range(v, s, s + w, t1, t2).unwrap(),
            ] {
                prop_assert!((0.0..=1.0).contains(&p));
            }
        }

        #[test]
        fn lower_is_nondecreasing_upper_is_nonincreasing(a in -100f64..100.0, b in -100f64..100.0, s in -50f64..50.0, t in 0.01f64..50.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(score_lower(lo, s, t).unwrap() <= score_lower(hi, s, t).unwrap());
            prop_assert!(score_upper(lo, s, t).unwrap() >= score_upper(hi, s, t).unwrap());
        }

        #[test]
        fn geometric_mean_dominance(ps in proptest::collection::vec(0.0f64..=1.0, 1..12)) {
            let g = geometric_mean(&ps);
            let max = ps.iter().cloned().fold(0.0, f64::max);
            prop_assert!(g <= max + 1e-12);
            prop_assert_eq!(g == 0.0, ps.iter().any(|&p| p == 0.0));
        }

        #[test]
        fn eval_reward_is_performance(p in 0.0f64..=1.0, f in -1.0f64..=0.0) {
            prop_assert_eq!(final_reward(p, f, RewardMode::Eval).to_bits(), p.to_bits());
            prop_assert!((0.0..=1.0).contains(&final_reward(p, f, RewardMode::Train)));
        }
    }
}
