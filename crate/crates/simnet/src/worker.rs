//! Worker runtime: registers with a master, heartbeats, runs `simulate` jobs
//! against local task definitions and reconnects with bounded backoff.

use std::collections::BTreeMap;
use std::io::BufReader;
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, info, warn};
use tlgrpo_core::surrogate::TaskDefinition;

use crate::protocol::{params_from_variables, read_frame, write_frame, Message};
use crate::SimnetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KillMode {
    /// Close the socket and exit.
    Crash,
    /// Stop heartbeats and replies but keep the socket open.
    Hang,
}

/// Test hooks for exercising the master's failure handling.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FaultConfig {
    /// Extra wall time spent on every job.
    pub sim_delay: Duration,
    /// Die on receipt of job `n + 1`, leaving that job unanswered.
    pub kill_after_jobs: Option<usize>,
    pub kill_mode: Option<KillMode>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerConfig {
    pub worker_id: String,
    pub capacity: usize,
    pub heartbeat_interval: Duration,
    /// Consecutive failed connection attempts before giving up.
    pub connect_attempts: u32,
    pub backoff_base: Duration,
    pub backoff_max: Duration,
    pub faults: FaultConfig,
}

impl WorkerConfig {
    pub fn new(worker_id: impl Into<String>) -> Self {
        WorkerConfig {
            worker_id: worker_id.into(),
            capacity: 1,
            heartbeat_interval: Duration::from_secs(5),
            connect_attempts: 10,
            backoff_base: Duration::from_millis(100),
            backoff_max: Duration::from_secs(2),
            faults: FaultConfig::default(),
        }
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u32 << attempt.min(16);
        (self.backoff_base * factor).min(self.backoff_max)
    }
}

#[derive(Default)]
struct Control {
    stop: AtomicBool,
    hung: AtomicBool,
    stream: Mutex<Option<TcpStream>>,
    received: AtomicUsize,
    completed: AtomicUsize,
}

impl Control {
    fn halted(&self) -> bool {
        self.stop.load(Ordering::SeqCst) || self.hung.load(Ordering::SeqCst)
    }

    fn close_socket(&self) {
        if let Some(s) = self.stream.lock().unwrap_or_else(|p| p.into_inner()).as_ref() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }

    fn kill(&self, mode: KillMode) {
        match mode {
            KillMode::Hang => self.hung.store(true, Ordering::SeqCst),
            KillMode::Crash => {
                self.stop.store(true, Ordering::SeqCst);
                self.close_socket();
            }
        }
    }
}

pub struct WorkerHandle {
    ctl: Arc<Control>,
    thread: Option<JoinHandle<Result<(), SimnetError>>>,
}

impl WorkerHandle {
    /// Simulates a failure from outside the worker.
    pub fn kill(&self, mode: KillMode) {
        self.ctl.kill(mode);
    }

    /// Graceful stop: in-flight replies are dropped and the socket is closed.
    pub fn stop(&self) {
        self.ctl.stop.store(true, Ordering::SeqCst);
        self.ctl.close_socket();
    }

    pub fn jobs_completed(&self) -> usize {
        self.ctl.completed.load(Ordering::SeqCst)
    }

    pub fn is_finished(&self) -> bool {
        self.thread.as_ref().map_or(true, JoinHandle::is_finished)
    }

    /// Waits for the worker loop to exit.
    pub fn join(mut self) -> Result<(), SimnetError> {
        self.thread.take().map_or(Ok(()), |t| t.join().unwrap_or(Err(SimnetError::Disconnected)))
    }
}

impl Drop for WorkerHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop();
        }
    }
}

/// Starts a worker serving `tasks` in a background thread.
pub fn worker_serve(master: impl Into<String>, tasks: Vec<TaskDefinition>, cfg: WorkerConfig) -> WorkerHandle {
    let ctl = Arc::new(Control::default());
    let addr = master.into();
    let tasks: Arc<BTreeMap<String, TaskDefinition>> = Arc::new(tasks.into_iter().map(|t| (t.task_id.clone(), t)).collect());
    let thread_ctl = Arc::clone(&ctl);
    let thread = thread::spawn(move || run(&addr, tasks, &cfg, &thread_ctl));
    WorkerHandle { ctl, thread: Some(thread) }
}

fn run(addr: &str, tasks: Arc<BTreeMap<String, TaskDefinition>>, cfg: &WorkerConfig, ctl: &Arc<Control>) -> Result<(), SimnetError> {
    let mut failures = 0u32;
    while !ctl.halted() {
        match TcpStream::connect(addr) {
            Ok(stream) => {
                failures = 0;
                let _ = stream.set_nodelay(true);
                if let Err(e) = session(stream, &tasks, cfg, ctl) {
                    debug!("worker {} session ended: {e}", cfg.worker_id);
                }
                if ctl.halted() {
                    break;
                }
                warn!("worker {} lost its master connection; reconnecting", cfg.worker_id);
                thread::sleep(cfg.backoff_base);
            }
            Err(e) => {
                failures += 1;
                if failures >= cfg.connect_attempts {
                    return Err(SimnetError::Unreachable(failures));
                }
                debug!("worker {} connect attempt {failures} failed: {e}", cfg.worker_id);
                thread::sleep(cfg.backoff(failures - 1));
            }
        }
    }
    Ok(())
}

fn session(
    stream: TcpStream,
    tasks: &Arc<BTreeMap<String, TaskDefinition>>,
    cfg: &WorkerConfig,
    ctl: &Arc<Control>,
) -> Result<(), SimnetError> {
    let io = |e: std::io::Error| SimnetError::Io(e.to_string());
    *ctl.stream.lock().unwrap_or_else(|p| p.into_inner()) = Some(stream.try_clone().map_err(io)?);
    let writer = Arc::new(Mutex::new(stream.try_clone().map_err(io)?));
    let send = {
        let writer = Arc::clone(&writer);
        move |msg: &Message| {
            let mut w = writer.lock().unwrap_or_else(|p| p.into_inner());
            write_frame(&mut *w, msg)
        }
    };
    send(&Message::Register { worker_id: cfg.worker_id.clone(), task_ids: tasks.keys().cloned().collect(), capacity: cfg.capacity })
        .map_err(io)?;
    info!("worker {} registered", cfg.worker_id);

    let alive = Arc::new(AtomicBool::new(true));
    let heartbeat = {
        let (alive, ctl, send, interval, id) =
            (Arc::clone(&alive), Arc::clone(ctl), send.clone(), cfg.heartbeat_interval, cfg.worker_id.clone());
        thread::spawn(move || {
            let step = (interval / 20).max(Duration::from_millis(1));
            'outer: loop {
                let mut waited = Duration::ZERO;
                while waited < interval {
                    if !alive.load(Ordering::SeqCst) || ctl.halted() {
                        break 'outer;
                    }
                    thread::sleep(step);
                    waited += step;
                }
                if ctl.halted() || send(&Message::Ping { worker_id: Some(id.clone()) }).is_err() {
                    break;
                }
            }
        })
    };

    let mut reader = BufReader::new(stream);
    let result = loop {
        let msg = match read_frame(&mut reader) {
            Ok(Some(msg)) => msg,
            Ok(None) => break Ok(()),
            Err(e) => break Err(e),
        };
        if ctl.halted() {
            // A hung worker keeps draining the socket without answering.
            continue;
        }
        match msg {
            Message::Simulate { request_id, task_id, variables } => {
                let n = ctl.received.fetch_add(1, Ordering::SeqCst);
                if cfg.faults.kill_after_jobs == Some(n) {
                    warn!("worker {} injecting {:?} on job {request_id}", cfg.worker_id, cfg.faults.kill_mode);
                    ctl.kill(cfg.faults.kill_mode.unwrap_or(KillMode::Crash));
                    continue;
                }
                let (tasks, ctl, send, delay) = (Arc::clone(tasks), Arc::clone(ctl), send.clone(), cfg.faults.sim_delay);
                thread::spawn(move || {
                    if !delay.is_zero() {
                        thread::sleep(delay);
                    }
                    let reply = run_job(&tasks, &request_id, &task_id, &variables);
                    if ctl.halted() {
                        return;
                    }
                    if send(&reply).is_ok() {
                        ctl.completed.fetch_add(1, Ordering::SeqCst);
                    }
                });
            }
            Message::Shutdown => {
                info!("worker {} told to shut down", cfg.worker_id);
                ctl.stop.store(true, Ordering::SeqCst);
                break Ok(());
            }
            Message::Pong => {}
            Message::Error { request_id, reason } => warn!("master reported error ({request_id:?}): {reason}"),
            other => debug!("worker ignoring frame {other:?}"),
        }
    };
    alive.store(false, Ordering::SeqCst);
    let _ = heartbeat.join();
    result
}

fn run_job(tasks: &BTreeMap<String, TaskDefinition>, request_id: &str, task_id: &str, variables: &BTreeMap<String, f64>) -> Message {
    let error = |reason: String| Message::Error { request_id: Some(request_id.to_string()), reason };
    let Some(task) = tasks.get(task_id) else {
        return error(format!("unknown task `{task_id}`"));
    };
    match params_from_variables(task, variables) {
        Err(reason) => error(reason),
        Ok(params) => match task.simulate(&params) {
            Ok(metrics) => Message::Result { request_id: request_id.to_string(), metrics },
            Err(e) => error(e.to_string()),
        },
    }
}
