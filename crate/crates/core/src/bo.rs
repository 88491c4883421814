//! Gaussian-process Bayesian optimization and uniform random search over the
//! scalar Eval reward, both under a fixed simulation budget.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{BoError, EnvError};
use crate::rng::lane_rng;
use crate::surrogate::{ActionVector, QueryInstance, SimBackend, TaskDefinition};

const JITTER_STEPS: u32 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    /// Squared-exponential lengthscale in unit-box coordinates.
    pub lengthscale: f64,
    pub signal_variance: f64,
    /// Observation noise variance; escalated tenfold per failed factorization.
    pub noise: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig { lengthscale: 0.2, signal_variance: 1.0, noise: 1e-6 }
    }
}

impl KernelConfig {
    fn k(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.signal_variance * (-0.5 * d2 / (self.lengthscale * self.lengthscale)).exp()
    }
}

/// GP posterior with a constant prior mean equal to the observed mean.
#[derive(Debug, Clone)]
pub struct GpModel {
    kernel: KernelConfig,
    points: Vec<Vec<f64>>,
    prior_mean: f64,
    chol: Cholesky<f64, nalgebra::Dyn>,
    alpha: DVector<f64>,
    /// Noise variance actually used after jitter escalation.
    pub noise: f64,
}

pub fn fit_gp(points: &[Vec<f64>], values: &[f64], kernel: KernelConfig) -> Result<GpModel, BoError> {
    if points.is_empty() {
        return Err(BoError::NoObservations);
    }
    if points.len() != values.len() {
        return Err(BoError::InvalidConfig(format!("{} points but {} values", points.len(), values.len())));
    }
    if !(kernel.lengthscale > 0.0 && kernel.signal_variance > 0.0 && kernel.noise > 0.0) {
        return Err(BoError::InvalidConfig("kernel parameters must be positive".into()));
    }
    let n = points.len();
    let prior_mean = values.iter().sum::<f64>() / n as f64;
    let y = DVector::from_iterator(n, values.iter().map(|v| v - prior_mean));
    let mut noise = kernel.noise;
    for _ in 0..JITTER_STEPS {
        let k = DMatrix::from_fn(n, n, |i, j| kernel.k(&points[i], &points[j]) + if i == j { noise } else { 0.0 });
        if let Some(chol) = k.cholesky() {
            let alpha = chol.solve(&y);
            return Ok(GpModel { kernel, points: points.to_vec(), prior_mean, chol, alpha, noise });
        }
        noise *= 10.0;
    }
    Err(BoError::SingularKernel(noise / 10.0))
}

impl GpModel {
    /// Posterior mean and variance of the latent function at `x`.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let ks = DVector::from_iterator(self.points.len(), self.points.iter().map(|p| self.kernel.k(p, x)));
        let mean = self.prior_mean + ks.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&ks).expect("Cholesky factor is nonsingular");
        let var = (self.kernel.signal_variance - v.dot(&v)).max(0.0);
        (mean, var)
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Closed-form expected improvement over `best + xi`; never negative.
pub fn expected_improvement(model: &GpModel, x: &[f64], best: f64, xi: f64) -> f64 {
    let (mean, var) = model.predict(x);
    ei_from_moments(mean, var.sqrt(), best, xi)
}

fn ei_from_moments(mean: f64, sd: f64, best: f64, xi: f64) -> f64 {
    let gain = mean - best - xi;
    if sd < 1e-12 {
        return gain.max(0.0);
    }
    let z = gain / sd;
    (gain * normal_cdf(z) + sd * normal_pdf(z)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoConfig {
    pub pool_size: usize,
    pub xi: f64,
    pub seed: u64,
    pub kernel: KernelConfig,
}

impl Default for BoConfig {
    fn default() -> Self {
        BoConfig { pool_size: 2048, xi: 0.01, seed: 0, kernel: KernelConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub params: Vec<f64>,
    pub reward: f64,
}

/// `history[0]` is the initial point, followed by one entry per budgeted simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best_params: Vec<f64>,
    pub best_reward: f64,
    pub history: Vec<Evaluation>,
}

impl SearchResult {
    fn from_history(history: Vec<Evaluation>) -> Self {
        let best = history
            .iter()
            .enumerate()
            .fold(0, |b, (i, e)| if e.reward > history[b].reward { i } else { b });
        SearchResult { best_params: history[best].params.clone(), best_reward: history[best].reward, history }
    }

    /// Running maximum of rewards, starting at the initial point.
    pub fn history_best(&self) -> Vec<f64> {
        self.history
            .iter()
            .scan(f64::NEG_INFINITY, |best, e| {
                *best = best.max(e.reward);
                Some(*best)
            })
            .collect()
    }
}

fn evaluate(backend: &dyn SimBackend, query: &QueryInstance, task: &TaskDefinition, params: Vec<f64>) -> Result<Evaluation, BoError> {
    let metrics = backend.simulate(task, &ActionVector(params.clone()))?;
    let reward = query.specs.score(&metrics).map_err(EnvError::from)?.performance;
    Ok(Evaluation { params, reward })
}

fn to_unit(task: &TaskDefinition, w: &[f64]) -> Vec<f64> {
    w.iter().zip(&task.bounds).map(|(v, b)| b.normalize(*v)).collect()
}

fn from_unit(task: &TaskDefinition, u: &[f64]) -> Vec<f64> {
    u.iter().zip(&task.bounds).map(|(v, b)| b.clamp(b.denormalize(*v))).collect()
}

/// Seeds with the query's initial point, then spends `budget` simulations on EI maximizers.
pub fn run_bo(
    query: &QueryInstance,
    task: &TaskDefinition,
    budget: usize,
    cfg: &BoConfig,
    backend: &dyn SimBackend,
) -> Result<SearchResult, BoError> {
    if budget == 0 || cfg.pool_size == 0 {
        return Err(BoError::InvalidConfig("budget and pool_size must be >= 1".into()));
    }
    let mut history = vec![evaluate(backend, query, task, query.initial_params.clone())?];
    for round in 0..budget {
        let points: Vec<Vec<f64>> = history.iter().map(|e| to_unit(task, &e.params)).collect();
        let values: Vec<f64> = history.iter().map(|e| e.reward).collect();
        let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let model = fit_gp(&points, &values, cfg.kernel)?;
        let mut rng = lane_rng(cfg.seed, &[round as u64]);
        let mut pick = (f64::NEG_INFINITY, Vec::new());
        for _ in 0..cfg.pool_size {
            let u: Vec<f64> = (0..task.dim).map(|_| rng.gen::<f64>()).collect();
            let ei = expected_improvement(&model, &u, best, cfg.xi);
            if ei > pick.0 {
                pick = (ei, u);
            }
        }
        history.push(evaluate(backend, query, task, from_unit(task, &pick.1))?);
    }
    Ok(SearchResult::from_history(history))
}

/// Uniform sampling in bounds with the same budget.
pub fn random_search(
    query: &QueryInstance,
    task: &TaskDefinition,
    budget: usize,
    seed: u64,
    backend: &dyn SimBackend,
) -> Result<SearchResult, BoError> {
    let mut history = vec![evaluate(backend, query, task, query.initial_params.clone())?];
    let mut rng = lane_rng(seed, &[]);
    for _ in 0..budget {
        let params = task.sample_uniform_point(&mut rng);
        history.push(evaluate(backend, query, task, params)?);
    }
    Ok(SearchResult::from_history(history))
}
