//! Subcommand implementations. Each takes a validated [`RunConfig`] (where
//! relevant) and returns a summary; printing is left to the binary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tlgrpo_core::bo::{random_search, run_bo, BoConfig, SearchResult};
use tlgrpo_core::policy::{Checkpoint, FeatureMode, PolicyParameters};
use tlgrpo_core::rl::{
    budget_audit, evaluate_policy, train as train_policy, BudgetReport, EvalSettings, LogRecord, Phase, RunSink, TurnLog,
    LOG_SCHEMA_VERSION,
};
use tlgrpo_core::rng::{derive_seed, str_key};
use tlgrpo_core::spec_score::{metrics_from_toml_str, SpecSet};
use tlgrpo_core::surrogate::{build_named_task, synthesize_queries, LocalSim, QueryInstance, SimBackend, TaskDefinition};
use tlgrpo_simnet::RemoteSim;

use crate::config::{EnvConfig, RunConfig, SimMode};
use crate::data::{
    ensure_dir, file_sha256, read_json, read_jsonl, write_json, write_jsonl, JsonlSink, RunLog, EVAL_IN_FILE, EVAL_OOD_FILE,
    TASKS_FILE, TRAIN_FILE,
};
use crate::report::{check_traces, traces_from_turns, turn_csv, EvalReport};
use crate::{io_err, HarnessError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    In,
    Ood,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Policy,
    Bo,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    MultiTurn,
    StIter,
}

fn label<T: Serialize>(v: T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

/// Runs `f` on a pool sized by `exec.threads`.
pub fn with_pool<R: Send>(cfg: &RunConfig, f: impl FnOnce() -> R + Send) -> R {
    match cfg.exec.threads {
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build().expect("thread pool builds").install(f),
        None => f(),
    }
}

pub fn backend(cfg: &RunConfig) -> Result<Box<dyn SimBackend>, HarnessError> {
    Ok(match cfg.exec.mode {
        SimMode::Local => Box::new(LocalSim),
        SimMode::Remote => {
            let master = cfg.exec.master.as_deref().expect("validated");
            Box::new(RemoteSim::connect(master, Duration::from_secs(cfg.exec.timeout_secs))?)
        }
    })
}

/// In-domain and held-out task definitions.
pub fn build_tasks(env: &EnvConfig) -> Result<(Vec<TaskDefinition>, Vec<TaskDefinition>), HarnessError> {
    let build = |specs: &[crate::config::TaskSpec]| -> Result<Vec<TaskDefinition>, HarnessError> {
        specs.iter().map(|t| Ok(build_named_task(&t.id, t.seed, t.dim, env.num_objectives)?)).collect()
    };
    Ok((build(&env.train_tasks)?, build(&env.ood_tasks)?))
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub tasks: Vec<TaskDefinition>,
    pub train: Vec<QueryInstance>,
    pub eval_in: Vec<QueryInstance>,
    pub eval_ood: Vec<QueryInstance>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset, HarnessError> {
        Ok(Dataset {
            tasks: read_json(&dir.join(TASKS_FILE))?,
            train: read_jsonl(&dir.join(TRAIN_FILE))?,
            eval_in: read_jsonl(&dir.join(EVAL_IN_FILE))?,
            eval_ood: read_jsonl(&dir.join(EVAL_OOD_FILE))?,
        })
    }

    pub fn split(&self, split: Split) -> Vec<QueryInstance> {
        match split {
            Split::In => self.eval_in.clone(),
            Split::Ood => self.eval_ood.clone(),
            Split::All => self.eval_in.iter().chain(&self.eval_ood).cloned().collect(),
        }
    }
}

/// Builds the whole dataset in memory; [`synth`] writes it out.
pub fn synthesize(env: &EnvConfig) -> Result<Dataset, HarnessError> {
    let (train_tasks, ood_tasks) = build_tasks(env)?;
    let k = train_tasks.len();
    let mut train = Vec::with_capacity(env.train_queries);
    for (i, task) in train_tasks.iter().enumerate() {
        let n = env.train_queries / k + usize::from(i < env.train_queries % k);
        train.extend(synthesize_queries(task, n, env.query_seed, env.offset_scale, env.max_turns)?);
    }
    let eval_seed = env.query_seed + 1;
    let eval_for = |tasks: &[TaskDefinition]| -> Result<Vec<QueryInstance>, HarnessError> {
        let mut out = Vec::new();
        for task in tasks {
            out.extend(synthesize_queries(task, env.eval_queries_per_task, eval_seed, env.offset_scale, env.max_turns)?);
        }
        Ok(out)
    };
    let eval_in = eval_for(&train_tasks)?;
    let eval_ood = eval_for(&ood_tasks)?;
    let tasks = train_tasks.into_iter().chain(ood_tasks).collect();
    Ok(Dataset { tasks, train, eval_in, eval_ood })
}

#[derive(Debug, Clone)]
pub struct SynthSummary {
    pub train: usize,
    pub eval_in: usize,
    pub eval_ood: usize,
    pub dir: PathBuf,
}

pub fn synth(cfg: &RunConfig) -> Result<SynthSummary, HarnessError> {
    let data = synthesize(&cfg.env)?;
    let dir = &cfg.paths.data_dir;
    ensure_dir(dir)?;
    write_json(&dir.join(TASKS_FILE), &data.tasks)?;
    write_jsonl(&dir.join(TRAIN_FILE), &data.train)?;
    write_jsonl(&dir.join(EVAL_IN_FILE), &data.eval_in)?;
    write_jsonl(&dir.join(EVAL_OOD_FILE), &data.eval_ood)?;
    Ok(SynthSummary { train: data.train.len(), eval_in: data.eval_in.len(), eval_ood: data.eval_ood.len(), dir: dir.clone() })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub log: PathBuf,
    pub log_sha256: String,
    pub checkpoint: PathBuf,
    pub budget: BudgetReport,
    pub iterations: usize,
    pub last_mean_reward: f64,
}

pub fn train(cfg: &RunConfig, init: Option<&Path>) -> Result<TrainSummary, HarnessError> {
    let data = Dataset::load(&cfg.paths.data_dir)?;
    let init = init.map(load_checkpoint).transpose()?;
    let backend = backend(cfg)?;
    let tag = cfg.train.algorithm.label();
    let log_path = cfg.paths.log_dir.join(format!("train-{tag}.jsonl"));
    let mut sink = JsonlSink::create(&log_path, Some(&cfg.paths.checkpoint_dir), tag)?;
    let outcome = with_pool(cfg, || train_policy(&cfg.train, &data.tasks, &data.train, backend.as_ref(), init, &mut sink))?;
    let budget = budget_audit(&outcome.budget, &cfg.train)?;
    sink.record(&LogRecord::Budget(budget.clone()))?;
    let log = sink.finish()?;
    let checkpoint = cfg.paths.checkpoint_dir.join(format!("{tag}-final.json"));
    std::fs::write(&checkpoint, outcome.checkpoint.to_json()).map_err(|e| io_err(&checkpoint, e))?;
    Ok(TrainSummary {
        log_sha256: file_sha256(&log)?,
        log,
        checkpoint,
        budget,
        iterations: outcome.summaries.len(),
        last_mean_reward: outcome.summaries.last().map_or(0.0, |s| s.mean_reward),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(Checkpoint::from_json(&text)?)
}

#[derive(Debug, Clone)]
pub struct EvalRequest {
    /// `None` evaluates the untrained (all-zero) policy.
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    pub method: Method,
    pub protocol: Protocol,
    /// Defaults to `paths.log_dir`.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub log: PathBuf,
    pub log_sha256: String,
    pub report_path: PathBuf,
}

/// Header config of an evaluation log; enough to rebuild the report labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalHeader {
    pub method: String,
    pub protocol: String,
    pub split: String,
    pub policy: String,
    pub max_turns: usize,
    pub seed: u64,
}

/// Rolls out one method on one split and returns the turn log records (initial point first per query).
pub fn eval_turns(
    cfg: &RunConfig,
    tasks: &[TaskDefinition],
    queries: &[QueryInstance],
    policy: &PolicyParameters,
    method: Method,
    protocol: Protocol,
    backend: &dyn SimBackend,
) -> Result<Vec<TurnLog>, HarnessError> {
    let turns = cfg.train.max_turns;
    match method {
        Method::Policy => {
            let feature_mode = match protocol {
                Protocol::MultiTurn => FeatureMode::MultiTurn,
                Protocol::StIter => FeatureMode::StIter { include_best: cfg.eval.include_best },
            };
            let settings = EvalSettings {
                seed: cfg.eval.seed,
                max_turns: turns,
                temperature: cfg.eval.temperature,
                top_p: cfg.eval.top_p,
                feature_mode,
            };
            let episodes = evaluate_policy(policy, tasks, queries, backend, &settings)?;
            Ok(episodes
                .iter()
                .flat_map(|e| {
                    let t = &e.trajectory;
                    std::iter::once(TurnLog::initial(None, &t.query_id, &t.task_id, &t.initial))
                        .chain(TurnLog::from_trajectory(t, Phase::Eval, None, None, None))
                })
                .collect())
        }
        Method::Bo | Method::Random => {
            let results: Vec<SearchResult> = queries
                .par_iter()
                .map(|q| {
                    let task = tasks
                        .iter()
                        .find(|t| t.task_id == q.task_id)
                        .ok_or_else(|| HarnessError::Data(format!("query {} names unknown task {}", q.query_id, q.task_id)))?;
                    let seed = derive_seed(cfg.eval.seed, &[str_key(&q.query_id)]);
                    Ok(match method {
                        Method::Bo => run_bo(q, task, turns, &BoConfig { seed, ..cfg.eval.bo }, backend)?,
                        _ => random_search(q, task, turns, seed, backend)?,
                    })
                })
                .collect::<Result<_, HarnessError>>()?;
            Ok(queries
                .iter()
                .zip(results)
                .flat_map(|(q, r)| {
                    r.history
                        .into_iter()
                        .enumerate()
                        .map(|(i, e)| TurnLog {
                            iteration: None,
                            phase: if i == 0 { Phase::Initial } else { Phase::Eval },
                            query_id: q.query_id.clone(),
                            task_id: q.task_id.clone(),
                            turn: i,
                            member: None,
                            params: e.params,
                            choices: None,
                            metrics: None,
                            valid: true,
                            reward: e.reward,
                            log_prob_old: None,
                            advantage: None,
                        })
                        .collect::<Vec<_>>()
                })
                .collect())
        }
    }
}

pub fn eval(cfg: &RunConfig, req: &EvalRequest) -> Result<EvalOutput, HarnessError> {
    let data = Dataset::load(&cfg.paths.data_dir)?;
    let queries = data.split(req.split);
    let (policy, policy_tag) = match &req.checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let tag = ckpt.content_hash();
            (ckpt.policy, tag)
        }
        None => (PolicyParameters::zeros(), "untrained".to_string()),
    };
    let protocol = match (req.method, req.protocol) {
        (Method::Policy, p) => label(p),
        (m, Protocol::StIter) => {
            warn!("{} ignores the evaluation protocol", label(m));
            "none".to_string()
        }
        _ => "none".to_string(),
    };
    let header = EvalHeader {
        method: label(req.method),
        protocol,
        split: label(req.split),
        policy: if req.method == Method::Policy { policy_tag } else { "none".into() },
        max_turns: cfg.train.max_turns,
        seed: cfg.eval.seed,
    };
    let backend = backend(cfg)?;
    let turns = with_pool(cfg, || eval_turns(cfg, &data.tasks, &queries, &policy, req.method, req.protocol, backend.as_ref()))?;
    let traces = traces_from_turns(&turns)?;
    let report = EvalReport::from_traces(&header.method, &header.protocol, &header.split, &traces);

    let dir = req.out_dir.clone().unwrap_or_else(|| cfg.paths.log_dir.clone());
    ensure_dir(&dir)?;
    let stem = format!("eval-{}-{}-{}", header.method, header.protocol, header.split);
    let log_path = dir.join(format!("{stem}.jsonl"));
    let mut sink = JsonlSink::create(&log_path, None, &stem)?;
    sink.record(&LogRecord::Header {
        schema_version: LOG_SCHEMA_VERSION,
        kind: "eval".into(),
        label: stem.clone(),
        config: serde_json::to_value(&header).expect("header serializes"),
    })?;
    for t in &turns {
        sink.record(&LogRecord::Turn(t.clone()))?;
    }
    let log = sink.finish()?;
    let report_path = dir.join(format!("{stem}.report.json"));
    write_json(&report_path, &report)?;
    Ok(EvalOutput { report, log_sha256: file_sha256(&log)?, log, report_path })
}

fn eval_header(log: &RunLog) -> Result<EvalHeader, HarnessError> {
    log.records
        .iter()
        .find_map(|r| match r {
            LogRecord::Header { kind, config, .. } if kind == "eval" => serde_json::from_value(config.clone()).ok(),
            _ => None,
        })
        .ok_or_else(|| HarnessError::Data("not an evaluation log (no eval header)".into()))
}

/// Rebuilds the report of an evaluation log.
pub fn report_from_log(log: &RunLog) -> Result<EvalReport, HarnessError> {
    let header = eval_header(log)?;
    let traces = traces_from_turns(log.turns())?;
    Ok(EvalReport::from_traces(&header.method, &header.protocol, &header.split, &traces))
}

#[derive(Debug, Clone)]
pub struct ReportOutput {
    pub text: String,
    pub csv: String,
    pub skipped_lines: usize,
}

/// Turn analysis over evaluation logs; logs of other kinds are skipped with a warning.
pub fn report(logs: &[PathBuf], csv_out: Option<&Path>) -> Result<ReportOutput, HarnessError> {
    let mut reports = Vec::new();
    let mut all_traces = Vec::new();
    let mut skipped_lines = 0;
    let mut text = String::new();
    for path in logs {
        let log = RunLog::read(path)?;
        skipped_lines += log.skipped;
        let header = match eval_header(&log) {
            Ok(h) => h,
            Err(_) => {
                warn!("{}: not an evaluation log, skipping", path.display());
                continue;
            }
        };
        let traces = traces_from_turns(log.turns())?;
        let r = EvalReport::from_traces(&header.method, &header.protocol, &header.split, &traces);
        text.push_str(&r.summary_table());
        text.push('\n');
        reports.push(r);
        all_traces.push(traces);
    }
    if skipped_lines > 0 {
        let _ = writeln!(text, "warning: skipped {skipped_lines} corrupt log line(s)");
    }
    let csv = turn_csv(&reports, &all_traces);
    if let Some(path) = csv_out {
        std::fs::write(path, &csv).map_err(|e| io_err(path, e))?;
    }
    Ok(ReportOutput { text, csv, skipped_lines })
}

/// Scores a metric file against a spec file.
pub fn score(specs: &Path, metrics: &Path) -> Result<String, HarnessError> {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| io_err(p, e));
    let with_path = |p: &Path, e: tlgrpo_core::ScoreError| HarnessError::Data(format!("{}: {e}", p.display()));
    let set = SpecSet::from_toml_str(&read(specs)?).map_err(|e| with_path(specs, e))?;
    let values = metrics_from_toml_str(&read(metrics)?).map_err(|e| with_path(metrics, e))?;
    let breakdown = set.score(&values)?;
    let mut out = String::new();
    for ((name, p), obj) in breakdown.per_objective.iter().zip(set.objectives()) {
        let _ = writeln!(out, "{name:<12} {:<12} value={:<14} p={p:.6}", obj.kind.label(), values[name]);
    }
    let _ = writeln!(out, "P = {:.6}", breakdown.performance);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifySummary {
    pub kind: String,
    pub queries: usize,
    pub records: usize,
}

/// Re-derives everything checkable from a log; with `report`, also requires the stored report to match exactly.
pub fn verify_log(log_path: &Path, report: Option<&Path>) -> Result<VerifySummary, HarnessError> {
    let log = RunLog::read(log_path)?;
    if log.skipped > 0 {
        return Err(HarnessError::Verify(format!("{} unparseable line(s)", log.skipped)));
    }
    let kind = log.header().map(|(k, _)| k.to_string()).ok_or_else(|| HarnessError::Verify("missing header record".into()))?;
    if let Some(LogRecord::Header { schema_version, .. }) = log.records.first() {
        if *schema_version != LOG_SCHEMA_VERSION {
            return Err(HarnessError::Verify(format!("schema version {schema_version}, expected {LOG_SCHEMA_VERSION}")));
        }
    } else {
        return Err(HarnessError::Verify("first record is not the header".into()));
    }
    let turns: Vec<&TurnLog> = log.turns().collect();
    if turns.iter().any(|t| !(0.0..=1.0).contains(&t.reward)) {
        return Err(HarnessError::Verify("reward outside [0, 1]".into()));
    }
    match kind.as_str() {
        "eval" => {
            let traces = traces_from_turns(turns.iter().copied())?;
            let initial: BTreeMap<String, f64> =
                turns.iter().filter(|t| t.phase == Phase::Initial).map(|t| (t.query_id.clone(), t.reward)).collect();
            check_traces(&traces, &initial)?;
            let rebuilt = report_from_log(&log)?;
            if let Some(path) = report {
                let stored: EvalReport = read_json(path)?;
                if stored != rebuilt {
                    return Err(HarnessError::Verify(format!("{} does not match the log", path.display())));
                }
            }
            Ok(VerifySummary { kind, queries: traces.len(), records: log.records.len() })
        }
        "train" => {
            let budget = log
                .records
                .iter()
                .find_map(|r| match r {
                    LogRecord::Budget(b) => Some(b),
                    _ => None,
                })
                .ok_or_else(|| HarnessError::Verify("train log has no budget record".into()))?;
            if budget.counted_total.samples != budget.expected_total || budget.counted_total.sims != budget.expected_total {
                return Err(HarnessError::Verify("budget record does not match the expected per-query cost".into()));
            }
            // Every logged policy sample is one simulated design, so the log itself must show the same cost.
            let mut per_visit: BTreeMap<(Option<usize>, &str), u64> = BTreeMap::new();
            for t in turns.iter().filter(|t| t.phase != Phase::Initial) {
                *per_visit.entry((t.iteration, t.query_id.as_str())).or_default() += 1;
            }
            if let Some(((it, q), n)) = per_visit.iter().find(|(_, &n)| n != budget.expected_total) {
                return Err(HarnessError::Verify(format!(
                    "iteration {it:?} query {q}: {n} logged samples, expected {}",
                    budget.expected_total
                )));
            }
            if per_visit.len() != budget.queries_audited {
                return Err(HarnessError::Verify(format!(
                    "{} query visits logged, budget audited {}",
                    per_visit.len(),
                    budget.queries_audited
                )));
            }
            let queries = per_visit.len();
            Ok(VerifySummary { kind, queries, records: log.records.len() })
        }
        other => Err(HarnessError::Verify(format!("unknown log kind `{other}`"))),
    }
}
