use std::net::ToSocketAddrs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use tlgrpo_core::rl::Algorithm;
use tlgrpo_harness::commands::{self, EvalRequest, Method, Protocol, Split};
use tlgrpo_harness::data::read_json;
use tlgrpo_harness::{HarnessError, RunConfig};
use tlgrpo_simnet::{master_serve, worker_serve, SchedulerConfig, WorkerConfig};

#[derive(Parser)]
#[command(name = "tlgrpo", version, about = "Turn-level GRPO on surrogate sizing tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build task definitions and train/eval query files.
    Synth {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a policy; writes a JSONL log, checkpoints and a budget audit.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train.algorithm` (tl-grpo, traj-grpo, single-turn-grpo).
        #[arg(long)]
        algorithm: Option<String>,
        /// Warm-start from this checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or the untrained policy), BO or random search.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "in")]
        split: Split,
        #[arg(long, value_enum, default_value = "policy")]
        method: Method,
        #[arg(long, value_enum, default_value = "multi-turn")]
        protocol: Protocol,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Per-turn analysis of evaluation logs.
    Report {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Score a metric file against a spec file.
    Score {
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Run the simulation master until it receives a shutdown frame.
    ServeMaster {
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        #[arg(long, default_value_t = 5.0)]
        heartbeat_secs: f64,
    },
    /// Serve the tasks in a tasks.json file to a master.
    ServeWorker {
        #[arg(long)]
        master: String,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, default_value = "worker")]
        id: String,
        #[arg(long, default_value_t = 1)]
        capacity: usize,
        #[arg(long, default_value_t = 5.0)]
        heartbeat_secs: f64,
    },
    /// Recompute everything checkable from a log, optionally against a stored report.
    VerifyLog {
        log: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn load(config: &Path) -> Result<RunConfig, HarnessError> {
    RunConfig::load(config)
}

fn secs(s: f64) -> Result<Duration, HarnessError> {
    Duration::try_from_secs_f64(s).map_err(|e| HarnessError::Config(format!("bad duration {s}: {e}")))
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Synth { config } => {
            let s = commands::synth(&load(&config)?)?;
            println!("wrote {} train, {} in-domain and {} held-out queries to {}", s.train, s.eval_in, s.eval_ood, s.dir.display());
        }
        Command::Train { config, algorithm, init } => {
            let mut cfg = load(&config)?;
            if let Some(a) = algorithm {
                cfg.train.algorithm = a.parse::<Algorithm>()?;
            }
            let s = commands::train(&cfg, init.as_deref())?;
            print!("{}", s.budget.table());
            println!("iterations: {}  last mean reward: {:.4}", s.iterations, s.last_mean_reward);
            println!("log: {} (sha256 {})", s.log.display(), s.log_sha256);
            println!("checkpoint: {}", s.checkpoint.display());
        }
        Command::Eval { config, checkpoint, split, method, protocol, out_dir } => {
            let cfg = load(&config)?;
            let out = commands::eval(&cfg, &EvalRequest { checkpoint, split, method, protocol, out_dir })?;
            print!("{}", out.report.summary_table());
            println!("log: {} (sha256 {})", out.log.display(), out.log_sha256);
            println!("report: {}", out.report_path.display());
        }
        Command::Report { logs, csv } => {
            let out = commands::report(&logs, csv.as_deref())?;
            print!("{}", out.text);
            if csv.is_none() {
                print!("{}", out.csv);
            }
        }
        Command::Score { specs, metrics } => print!("{}", commands::score(&specs, &metrics)?),
        Command::ServeMaster { bind, heartbeat_secs } => {
            let addr = bind.to_socket_addrs().map_err(|e| HarnessError::Config(format!("{bind}: {e}")))?.next();
            let addr = addr.ok_or_else(|| HarnessError::Config(format!("{bind} resolves to nothing")))?;
            let cfg = SchedulerConfig { heartbeat_interval: secs(heartbeat_secs)?, ..SchedulerConfig::default() };
            let master = master_serve(addr, cfg)?;
            println!("master listening on {}", master.addr());
            master.wait();
        }
        Command::ServeWorker { master, tasks, id, capacity, heartbeat_secs } => {
            let tasks = read_json(&tasks)?;
            let cfg = WorkerConfig { capacity, heartbeat_interval: secs(heartbeat_secs)?, ..WorkerConfig::new(id) };
            worker_serve(master, tasks, cfg).join()?;
        }
        Command::VerifyLog { log, report } => {
            let s = commands::verify_log(&log, report.as_deref())?;
            println!("ok: {} log, {} records, {} queries", s.kind, s.records, s.queries);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
