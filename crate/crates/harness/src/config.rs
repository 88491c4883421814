//! Run configuration: one TOML file covering training, environment,
//! execution and output paths. Unknown keys are rejected everywhere.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tlgrpo_core::bo::BoConfig;
use tlgrpo_core::rl::TrainConfig;
use tlgrpo_core::surrogate::{MAX_DIM, MIN_DIM};

use crate::HarnessError;

/// Dims of the eight in-domain tasks; the held-out tasks reuse the first four.
pub const DEFAULT_TRAIN_DIMS: [usize; 8] = [38, 28, 24, 24, 35, 17, 10, 37];
pub const DEFAULT_OOD_TASKS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: String,
    pub seed: u64,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub num_objectives: usize,
    pub offset_scale: f64,
    pub max_turns: usize,
    /// Total training queries, split evenly across the training tasks.
    pub train_queries: usize,
    pub eval_queries_per_task: usize,
    pub query_seed: u64,
    pub train_tasks: Vec<TaskSpec>,
    /// Held-out tasks: same dims as in-domain ones, different surrogate coefficients.
    pub ood_tasks: Vec<TaskSpec>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        let train_tasks: Vec<TaskSpec> = DEFAULT_TRAIN_DIMS
            .iter()
            .enumerate()
            .map(|(k, &dim)| TaskSpec { id: format!("in{}", k + 1), seed: 1000 + k as u64, dim })
            .collect();
        let ood_tasks = (0..DEFAULT_OOD_TASKS)
            .map(|k| TaskSpec { id: format!("ood{}", k + 1), seed: 2000 + k as u64, dim: DEFAULT_TRAIN_DIMS[k] })
            .collect();
        EnvConfig {
            num_objectives: 4,
            offset_scale: 0.1,
            max_turns: 5,
            train_queries: 10_000,
            eval_queries_per_task: 100,
            query_seed: 0,
            train_tasks,
            ood_tasks,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    Local,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecConfig {
    pub mode: SimMode,
    /// `host:port` of the simnet master in remote mode.
    pub master: Option<String>,
    pub timeout_secs: u64,
    /// Worker threads for parallel rollouts; `None` uses every core.
    pub threads: Option<usize>,
}

impl Default for ExecConfig {
    fn default() -> Self {
        ExecConfig { mode: SimMode::Local, master: None, timeout_secs: 60, threads: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    pub temperature: f64,
    pub top_p: f64,
    /// Expose the best reward so far to the policy under st-iter.
    pub include_best: bool,
    pub bo: BoConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { seed: 9, temperature: 1.0, top_p: 0.95, include_best: false, bo: BoConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub log_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { data_dir: "runs/data".into(), log_dir: "runs/logs".into(), checkpoint_dir: "runs/checkpoints".into() }
    }
}

pub const ENV_DATA_DIR: &str = "TLGRPO_DATA_DIR";
pub const ENV_LOG_DIR: &str = "TLGRPO_LOG_DIR";
pub const ENV_CHECKPOINT_DIR: &str = "TLGRPO_CHECKPOINT_DIR";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub env: EnvConfig,
    pub exec: ExecConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, applies path overrides from the environment, then validates.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_env_overrides(|k| std::env::var(k).ok());
        cfg.validate()?;
        Ok(cfg)
    }

    /// Only paths may be overridden from the environment.
    pub fn apply_env_overrides(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(v) = get(ENV_DATA_DIR) {
            self.paths.data_dir = v.into();
        }
        if let Some(v) = get(ENV_LOG_DIR) {
            self.paths.log_dir = v.into();
        }
        if let Some(v) = get(ENV_CHECKPOINT_DIR) {
            self.paths.checkpoint_dir = v.into();
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.train.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let env = &self.env;
        if env.train_tasks.is_empty() {
            return bad("env.train_tasks is empty".into());
        }
        if !(1..=tlgrpo_core::policy::MAX_OBJECTIVE_SLOTS).contains(&env.num_objectives) {
            return bad(format!("env.num_objectives {} outside 1..=8", env.num_objectives));
        }
        if !(0.0..1.0).contains(&env.offset_scale) {
            return bad(format!("env.offset_scale {} outside [0, 1)", env.offset_scale));
        }
        if env.max_turns < self.train.max_turns {
            return bad(format!("env.max_turns {} is below train.max_turns {}", env.max_turns, self.train.max_turns));
        }
        if env.train_queries < env.train_tasks.len() {
            return bad("env.train_queries must give every training task at least one query".into());
        }
        let mut ids = BTreeSet::new();
        for t in env.train_tasks.iter().chain(&env.ood_tasks) {
            if !ids.insert(t.id.as_str()) {
                return bad(format!("task id `{}` appears more than once across train and held-out tasks", t.id));
            }
            if !(MIN_DIM..=MAX_DIM).contains(&t.dim) {
                return bad(format!("task `{}` has dim {} outside {MIN_DIM}..={MAX_DIM}", t.id, t.dim));
            }
        }
        if self.exec.mode == SimMode::Remote && self.exec.master.is_none() {
            return bad("exec.mode = \"remote\" needs exec.master".into());
        }
        if self.exec.threads == Some(0) {
            return bad("exec.threads must be >= 1".into());
        }
        if !(self.eval.temperature > 0.0) || !(self.eval.top_p > 0.0 && self.eval.top_p <= 1.0) {
            return bad("eval.temperature must be > 0 and eval.top_p in (0, 1]".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
        assert_eq!(cfg.env.train_tasks.len() * cfg.env.eval_queries_per_task, 800);
        assert_eq!(cfg.env.ood_tasks.len() * cfg.env.eval_queries_per_task, 400);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("[train]\ngroup_sise = 4\n").is_err());
        assert!(RunConfig::from_toml_str("[nonsense]\n").is_err());
        assert!(RunConfig::from_toml_str("[train]\ngroup_size = 4\n").is_ok());
    }

    #[test]
    fn overlapping_task_ids_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.env.ood_tasks[0].id = cfg.env.train_tasks[2].id.clone();
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(m)) if m.contains("more than once")));
    }

    #[test]
    fn env_overrides_touch_paths_only() {
        let mut cfg = RunConfig::default();
        cfg.apply_env_overrides(|k| (k == ENV_LOG_DIR).then(|| "/tmp/x".to_string()));
        assert_eq!(cfg.paths.log_dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.paths.data_dir, PathsConfig::default().data_dir);
    }

    #[test]
    fn remote_mode_needs_master() {
        let cfg = RunConfig::from_toml_str("[exec]\nmode = \"remote\"\n");
        assert!(cfg.is_err());
    }
}
