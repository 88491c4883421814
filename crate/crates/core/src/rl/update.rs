use serde::{Deserialize, Serialize};

use super::rollout::TurnGroup;
use super::{clipped_surrogate, surrogate_active, TrainConfig};
use crate::error::RlError;
use crate::policy::{apply_update, component_grads, component_log_probs, HistoryFeatures, OptimizerState, PolicyParameters};

/// One policy sample with its frozen log-probabilities and advantage.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateSample {
    pub features: HistoryFeatures,
    pub choices: Vec<usize>,
    pub log_prob_old: f64,
    pub component_log_probs_old: Vec<f64>,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub objective: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub kl: f64,
    pub grad_norm: f64,
    pub num_samples: usize,
}

fn check_sample(index: usize, s: &UpdateSample) -> Result<(), RlError> {
    if !s.log_prob_old.is_finite()
        || s.component_log_probs_old.len() != s.choices.len()
        || s.component_log_probs_old.iter().any(|l| !l.is_finite())
    {
        return Err(RlError::MissingOldLogProb(index));
    }
    Ok(())
}

fn axpy(acc: &mut [f64], scale: f64, g: &[f64]) {
    for (a, x) in acc.iter_mut().zip(g) {
        *a += scale * x;
    }
}

/// Mean clipped surrogate over all samples minus `beta_kl · KL`, and its gradient.
///
/// With `reference = None` the KL term is skipped regardless of `beta_kl`.
pub fn objective_and_gradient(
    policy: &PolicyParameters,
    reference: Option<&PolicyParameters>,
    samples: &[UpdateSample],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>, UpdateStats), RlError> {
    if samples.is_empty() {
        return Err(RlError::EmptyBatch);
    }
    let temp = cfg.temperature;
    let use_kl = cfg.beta_kl > 0.0 && reference.is_some();
    let mut grad = vec![0.0; policy.weights.len()];
    let (mut objective, mut ratio_sum, mut clipped, mut kl_sum) = (0.0, 0.0, 0usize, 0.0);

    for (index, s) in samples.iter().enumerate() {
        check_sample(index, s)?;
        let comps = component_log_probs(policy, &s.features, &s.choices, temp)?;
        let log_prob: f64 = comps.iter().sum();
        let needs_grad = s.advantage != 0.0 || use_kl;
        let grads = if needs_grad { Some(component_grads(policy, &s.features, &s.choices, temp)?) } else { None };

        if cfg.per_component_ratio {
            let d = comps.len() as f64;
            let mut member = 0.0;
            for (i, (l, l_old)) in comps.iter().zip(&s.component_log_probs_old).enumerate() {
                let r = (l - l_old).exp();
                ratio_sum += r / d;
                member += clipped_surrogate(r, s.advantage, cfg.eps_low, cfg.eps_high) / d;
                if surrogate_active(r, s.advantage, cfg.eps_low, cfg.eps_high) {
                    axpy(&mut grad, s.advantage * r / d, &grads.as_ref().expect("advantage is nonzero")[i]);
                } else if s.advantage != 0.0 {
                    clipped += 1;
                }
            }
            objective += member;
        } else {
            let r = (log_prob - s.log_prob_old).exp();
            ratio_sum += r;
            objective += clipped_surrogate(r, s.advantage, cfg.eps_low, cfg.eps_high);
            if surrogate_active(r, s.advantage, cfg.eps_low, cfg.eps_high) {
                for g in grads.as_ref().expect("advantage is nonzero") {
                    axpy(&mut grad, s.advantage * r, g);
                }
            } else if s.advantage != 0.0 {
                clipped += 1;
            }
        }

        if use_kl {
            let reference = reference.expect("checked above");
            let ref_lp: f64 = component_log_probs(reference, &s.features, &s.choices, temp)?.iter().sum();
            let delta = ref_lp - log_prob;
            let kl = delta.exp() - delta - 1.0;
            kl_sum += kl;
            objective -= cfg.beta_kl * kl;
            let scale = -cfg.beta_kl * (1.0 - delta.exp());
            for g in grads.as_ref().expect("kl needs gradients") {
                axpy(&mut grad, scale, g);
            }
        }
    }

    let n = samples.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    let components = if cfg.per_component_ratio { samples.iter().map(|s| s.choices.len()).sum::<usize>() as f64 } else { n };
    let stats = UpdateStats {
        objective: objective / n,
        mean_ratio: ratio_sum / n,
        clip_fraction: clipped as f64 / components,
        kl: kl_sum / n,
        grad_norm: grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
        num_samples: samples.len(),
    };
    Ok((objective / n, grad, stats))
}

/// One ascent step on the collected batch.
pub fn grpo_update(
    policy: &mut PolicyParameters,
    optimizer: &mut OptimizerState,
    reference: Option<&PolicyParameters>,
    samples: &[UpdateSample],
    cfg: &TrainConfig,
) -> Result<UpdateStats, RlError> {
    let (_, grad, stats) = objective_and_gradient(policy, reference, samples, cfg)?;
    apply_update(policy, &grad, optimizer)?;
    Ok(stats)
}

impl TurnGroup {
    pub fn update_samples(&self) -> Vec<UpdateSample> {
        self.members
            .iter()
            .zip(&self.advantages)
            .map(|(m, &advantage)| UpdateSample {
                features: self.context.features.clone(),
                choices: m.action.choices.clone(),
                log_prob_old: m.log_prob_old,
                component_log_probs_old: m.component_log_probs_old.clone(),
                advantage,
            })
            .collect()
    }
}

/// Update from a batch of turn-level groups (all `G·T·B` members weigh equally).
pub fn tl_grpo_update(
    policy: &mut PolicyParameters,
    optimizer: &mut OptimizerState,
    reference: Option<&PolicyParameters>,
    groups: &[TurnGroup],
    cfg: &TrainConfig,
) -> Result<UpdateStats, RlError> {
    let samples: Vec<UpdateSample> = groups.iter().flat_map(TurnGroup::update_samples).collect();
    grpo_update(policy, optimizer, reference, &samples, cfg)
}
