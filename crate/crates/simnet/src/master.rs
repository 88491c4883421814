//! The master: accepts worker registrations and client jobs, queues jobs FIFO
//! per task, assigns them to idle capable workers and handles worker loss.
//!
//! All scheduling state lives in one `Mutex<State>`; connection threads only
//! parse frames and call into it. Outgoing frames go through a per-connection
//! writer thread so no socket write happens under the lock.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufReader, ErrorKind};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use tlgrpo_core::spec_score::MetricVector;

use crate::protocol::{read_frame, write_frame, Message, WorkerState, WorkerStatus};
use crate::SimnetError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulerConfig {
    pub heartbeat_interval: Duration,
    /// Consecutive missed heartbeats before a worker is declared dead.
    pub missed_heartbeats: u32,
    /// Extra attempts after the first when a worker is lost mid-job.
    pub retry_limit: u32,
    /// Longest a job may wait or run before it fails with a timeout.
    pub job_timeout: Duration,
    /// Longest a job may wait while no live worker advertises its task.
    pub queue_timeout: Duration,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            heartbeat_interval: Duration::from_secs(5),
            missed_heartbeats: 3,
            retry_limit: 2,
            job_timeout: Duration::from_secs(30),
            queue_timeout: Duration::from_secs(30),
        }
    }
}

type ConnId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobStatus {
    Queued,
    Running,
}

struct Job {
    task_id: String,
    variables: BTreeMap<String, f64>,
    client: ConnId,
    seq: u64,
    submitted: Instant,
    queued_at: Instant,
    started_at: Option<Instant>,
    attempts: u32,
    assigned: Option<ConnId>,
    status: JobStatus,
}

struct WorkerRecord {
    worker_id: String,
    task_ids: BTreeSet<String>,
    capacity: usize,
    last_heartbeat: Instant,
    dead: bool,
    in_flight: BTreeSet<String>,
}

impl WorkerRecord {
    fn state(&self) -> WorkerState {
        if self.dead {
            WorkerState::Dead
        } else if self.in_flight.is_empty() {
            WorkerState::Idle
        } else {
            WorkerState::Busy
        }
    }
}

struct Conn {
    tx: Sender<Message>,
    stream: TcpStream,
}

#[derive(Default)]
struct Counters {
    completed: u64,
    failed: u64,
    requeued: u64,
}

struct State {
    config: SchedulerConfig,
    conns: BTreeMap<ConnId, Conn>,
    workers: BTreeMap<ConnId, WorkerRecord>,
    jobs: HashMap<String, Job>,
    /// Queued jobs by submission order.
    queue: BTreeMap<u64, String>,
    next_seq: u64,
    next_conn: ConnId,
    shutting_down: bool,
    counters: Counters,
}

impl State {
    fn send(&self, conn: ConnId, msg: Message) {
        if let Some(c) = self.conns.get(&conn) {
            let _ = c.tx.send(msg);
        }
    }

    fn finish(&mut self, request_id: &str, outcome: Result<MetricVector, String>) {
        let Some(job) = self.jobs.remove(request_id) else { return };
        self.queue.remove(&job.seq);
        let msg = match outcome {
            Ok(metrics) => {
                self.counters.completed += 1;
                Message::Result { request_id: request_id.to_string(), metrics }
            }
            Err(reason) => {
                self.counters.failed += 1;
                Message::Error { request_id: Some(request_id.to_string()), reason }
            }
        };
        self.send(job.client, msg);
    }

    fn enqueue(&mut self, request_id: String, task_id: String, variables: BTreeMap<String, f64>, client: ConnId) {
        let now = Instant::now();
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.insert(seq, request_id.clone());
        self.jobs.insert(
            request_id,
            Job {
                task_id,
                variables,
                client,
                seq,
                submitted: now,
                queued_at: now,
                started_at: None,
                attempts: 0,
                assigned: None,
                status: JobStatus::Queued,
            },
        );
    }

    /// Hands the oldest runnable jobs to workers with free capacity.
    fn dispatch(&mut self) {
        if self.shutting_down {
            return;
        }
        let worker_ids: Vec<ConnId> = self.workers.keys().copied().collect();
        loop {
            let mut assigned_any = false;
            for &w in &worker_ids {
                let worker = &self.workers[&w];
                if worker.dead || worker.in_flight.len() >= worker.capacity {
                    continue;
                }
                let next = self
                    .queue
                    .iter()
                    .find(|(_, id)| worker.task_ids.contains(&self.jobs[*id].task_id))
                    .map(|(&seq, id)| (seq, id.clone()));
                let Some((seq, request_id)) = next else { continue };
                self.queue.remove(&seq);
                let job = self.jobs.get_mut(&request_id).expect("queued job exists");
                debug_assert!(job.status == JobStatus::Queued && job.assigned.is_none());
                job.status = JobStatus::Running;
                job.assigned = Some(w);
                job.attempts += 1;
                job.started_at = Some(Instant::now());
                let msg = Message::Simulate {
                    request_id: request_id.clone(),
                    task_id: job.task_id.clone(),
                    variables: job.variables.clone(),
                };
                self.workers.get_mut(&w).expect("worker exists").in_flight.insert(request_id);
                self.send(w, msg);
                assigned_any = true;
            }
            if !assigned_any {
                break;
            }
        }
        self.check_invariants();
    }

    /// Marks a worker dead and requeues (or fails) its in-flight jobs.
    fn worker_lost(&mut self, w: ConnId, reason: &str) {
        let Some(worker) = self.workers.get_mut(&w) else { return };
        if worker.dead {
            return;
        }
        worker.dead = true;
        warn!("worker {} lost: {reason}", worker.worker_id);
        let in_flight: Vec<String> = std::mem::take(&mut worker.in_flight).into_iter().collect();
        for request_id in in_flight {
            let retry_limit = self.config.retry_limit;
            let Some(job) = self.jobs.get_mut(&request_id) else { continue };
            if job.assigned != Some(w) {
                continue;
            }
            if job.attempts <= retry_limit {
                job.status = JobStatus::Queued;
                job.assigned = None;
                job.started_at = None;
                job.queued_at = Instant::now();
                self.queue.insert(job.seq, request_id.clone());
                self.counters.requeued += 1;
            } else {
                let attempts = job.attempts;
                self.finish(&request_id, Err(format!("retries exhausted after {attempts} attempts: {reason}")));
            }
        }
        if let Some(conn) = self.conns.remove(&w) {
            let _ = conn.stream.shutdown(Shutdown::Both);
        }
        self.dispatch();
    }

    fn from_worker_outcome(&mut self, w: ConnId, request_id: &str, outcome: Result<MetricVector, String>) {
        let Some(worker) = self.workers.get_mut(&w) else { return };
        if worker.dead {
            return;
        }
        worker.last_heartbeat = Instant::now();
        worker.in_flight.remove(request_id);
        match self.jobs.get(request_id) {
            Some(job) if job.assigned == Some(w) && job.status == JobStatus::Running => {
                self.finish(request_id, outcome);
            }
            _ => debug!("ignoring stale outcome for {request_id}"),
        }
        self.dispatch();
    }

    /// A job is either queued or assigned to exactly one live worker that lists it in flight.
    fn check_invariants(&self) {
        if !cfg!(debug_assertions) {
            return;
        }
        for (id, job) in &self.jobs {
            match job.status {
                JobStatus::Queued => assert!(job.assigned.is_none() && self.queue.get(&job.seq) == Some(id)),
                JobStatus::Running => {
                    let w = job.assigned.expect("running job has a worker");
                    let worker = &self.workers[&w];
                    assert!(!worker.dead && worker.in_flight.contains(id), "running job {id} not held by a live worker");
                    assert!(!self.queue.contains_key(&job.seq));
                }
            }
        }
    }

    fn status_report(&self) -> Message {
        let now = Instant::now();
        let workers = self
            .workers
            .values()
            .map(|w| WorkerStatus {
                worker_id: w.worker_id.clone(),
                task_ids: w.task_ids.iter().cloned().collect(),
                state: w.state(),
                in_flight: w.in_flight.iter().cloned().collect(),
                millis_since_heartbeat: now.duration_since(w.last_heartbeat).as_millis() as u64,
            })
            .collect();
        let mut queued = BTreeMap::new();
        for id in self.queue.values() {
            *queued.entry(self.jobs[id].task_id.clone()).or_insert(0) += 1;
        }
        let running = self.jobs.values().filter(|j| j.status == JobStatus::Running).count();
        Message::StatusReport { workers, queued, running }
    }
}

struct Shared {
    state: Mutex<State>,
    stop: AtomicBool,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// A running master. Dropping the handle does not stop the service; call [`MasterHandle::shutdown`].
pub struct MasterHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

/// Binds `addr` and starts accepting connections in background threads.
pub fn master_serve(addr: impl ToSocketAddrs, config: SchedulerConfig) -> Result<MasterHandle, SimnetError> {
    let listener = TcpListener::bind(addr).map_err(|e| SimnetError::Bind(e.to_string()))?;
    let local = listener.local_addr().map_err(|e| SimnetError::Bind(e.to_string()))?;
    listener.set_nonblocking(true).map_err(|e| SimnetError::Bind(e.to_string()))?;
    let state = State {
        config,
        conns: BTreeMap::new(),
        workers: BTreeMap::new(),
        jobs: HashMap::new(),
        queue: BTreeMap::new(),
        next_seq: 0,
        next_conn: 1,
        shutting_down: false,
        counters: Counters::default(),
    };
    let shared = Arc::new(Shared { state: Mutex::new(state), stop: AtomicBool::new(false) });
    info!("master listening on {local}");

    let accept_shared = Arc::clone(&shared);
    let acceptor = thread::spawn(move || accept_loop(listener, accept_shared));
    let monitor_shared = Arc::clone(&shared);
    let monitor = thread::spawn(move || monitor_loop(monitor_shared));
    Ok(MasterHandle { addr: local, shared, threads: vec![acceptor, monitor] })
}

impl MasterHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Worker table and queue depths.
    pub fn status(&self) -> Message {
        self.shared.lock().status_report()
    }

    pub fn worker_state(&self, worker_id: &str) -> Option<WorkerState> {
        let state = self.shared.lock();
        // Latest registration wins when a worker reconnected.
        state.workers.values().rev().find(|w| w.worker_id == worker_id).map(WorkerRecord::state)
    }

    /// Jobs completed, failed and requeued so far.
    pub fn counters(&self) -> (u64, u64, u64) {
        let s = self.shared.lock();
        (s.counters.completed, s.counters.failed, s.counters.requeued)
    }

    pub fn is_stopped(&self) -> bool {
        self.shared.stop.load(Ordering::SeqCst)
    }

    /// Fails all outstanding jobs in submission order, tells workers to exit and closes every connection.
    pub fn shutdown(&self) {
        shutdown_shared(&self.shared);
    }

    /// Blocks until the service stops (after [`MasterHandle::shutdown`] or a `shutdown` frame).
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

fn shutdown_shared(shared: &Shared) {
    let mut state = shared.lock();
    if state.shutting_down {
        return;
    }
    state.shutting_down = true;
    let mut pending: Vec<(u64, String)> = state.jobs.iter().map(|(id, j)| (j.seq, id.clone())).collect();
    pending.sort();
    for (_, id) in pending {
        state.finish(&id, Err("master shutting down".into()));
    }
    let workers: Vec<ConnId> = state.workers.iter().filter(|(_, w)| !w.dead).map(|(c, _)| *c).collect();
    for w in workers {
        state.send(w, Message::Shutdown);
    }
    // Dropping the senders lets each writer flush and then close its socket.
    state.conns.clear();
    shared.stop.store(true, Ordering::SeqCst);
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    while !shared.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                debug!("connection from {peer}");
                let conn_shared = Arc::clone(&shared);
                thread::spawn(move || serve_conn(conn_shared, stream));
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn monitor_loop(shared: Arc<Shared>) {
    let tick = {
        let s = shared.lock();
        (s.config.heartbeat_interval / 10).clamp(Duration::from_millis(5), Duration::from_millis(500))
    };
    while !shared.stop.load(Ordering::SeqCst) {
        thread::sleep(tick);
        let mut state = shared.lock();
        let cfg = state.config;
        let now = Instant::now();
        let deadline = cfg.heartbeat_interval * cfg.missed_heartbeats;
        let stale: Vec<ConnId> = state
            .workers
            .iter()
            .filter(|(_, w)| !w.dead && now.duration_since(w.last_heartbeat) > deadline)
            .map(|(c, _)| *c)
            .collect();
        for w in stale {
            state.worker_lost(w, "missed heartbeats");
        }
        let mut expired: Vec<(u64, String, String)> = Vec::new();
        for (id, job) in &state.jobs {
            let capable = state.workers.values().any(|w| !w.dead && w.task_ids.contains(&job.task_id));
            if job.status == JobStatus::Queued && !capable && now.duration_since(job.queued_at) > cfg.queue_timeout {
                expired.push((job.seq, id.clone(), format!("no capable worker for task `{}`", job.task_id)));
            } else if now.duration_since(job.submitted) > cfg.job_timeout {
                let since = job.started_at.unwrap_or(job.submitted);
                expired.push((job.seq, id.clone(), format!("timeout after {:?} (state since {:?})", cfg.job_timeout, now.duration_since(since))));
            }
        }
        expired.sort();
        for (_, id, reason) in expired {
            state.finish(&id, Err(reason));
        }
        state.dispatch();
    }
}

fn serve_conn(shared: Arc<Shared>, stream: TcpStream) {
    let (Ok(read_half), Ok(write_half), Ok(ctl)) = (stream.try_clone(), stream.try_clone(), stream.try_clone()) else {
        return;
    };
    let (tx, rx) = mpsc::channel::<Message>();
    thread::spawn(move || {
        let mut w = write_half;
        for msg in rx {
            if write_frame(&mut w, &msg).is_err() {
                break;
            }
        }
        let _ = w.shutdown(Shutdown::Both);
    });
    let conn = {
        let mut state = shared.lock();
        if state.shutting_down {
            return;
        }
        let id = state.next_conn;
        state.next_conn += 1;
        state.conns.insert(id, Conn { tx, stream: ctl });
        id
    };

    let mut reader = BufReader::new(read_half);
    loop {
        match read_frame(&mut reader) {
            Ok(Some(msg)) => {
                if handle(&shared, conn, msg) {
                    break;
                }
            }
            Ok(None) => break,
            Err(SimnetError::Protocol(reason)) => {
                shared.lock().send(conn, Message::Error { request_id: None, reason: format!("protocol violation: {reason}") });
            }
            Err(_) => break,
        }
    }

    let mut state = shared.lock();
    if state.workers.contains_key(&conn) {
        state.worker_lost(conn, "connection closed");
    }
    state.conns.remove(&conn);
}

/// Applies one frame; returns true when the connection should close.
fn handle(shared: &Shared, conn: ConnId, msg: Message) -> bool {
    let mut state = shared.lock();
    let is_worker = state.workers.contains_key(&conn);
    match msg {
        Message::Register { worker_id, task_ids, capacity } => {
            if is_worker {
                state.send(conn, Message::Error { request_id: None, reason: "protocol violation: already registered".into() });
                return false;
            }
            info!("worker {worker_id} registered for {task_ids:?}");
            state.workers.insert(
                conn,
                WorkerRecord {
                    worker_id,
                    task_ids: task_ids.into_iter().collect(),
                    capacity: capacity.max(1),
                    last_heartbeat: Instant::now(),
                    dead: false,
                    in_flight: BTreeSet::new(),
                },
            );
            state.dispatch();
        }
        Message::Ping { .. } => {
            if let Some(w) = state.workers.get_mut(&conn) {
                if w.dead {
                    return true;
                }
                w.last_heartbeat = Instant::now();
            }
            state.send(conn, Message::Pong);
        }
        Message::Simulate { request_id, task_id, variables } => {
            if is_worker {
                state.send(conn, Message::Error { request_id: Some(request_id), reason: "protocol violation: workers cannot submit jobs".into() });
            } else if state.shutting_down {
                state.send(conn, Message::Error { request_id: Some(request_id), reason: "master shutting down".into() });
            } else if state.jobs.contains_key(&request_id) {
                state.send(
                    conn,
                    Message::Error { request_id: Some(request_id), reason: "protocol violation: duplicate in-flight request_id".into() },
                );
            } else {
                state.enqueue(request_id, task_id, variables, conn);
                state.dispatch();
            }
        }
        Message::Result { request_id, metrics } if is_worker => state.from_worker_outcome(conn, &request_id, Ok(metrics)),
        Message::Error { request_id: Some(request_id), reason } if is_worker => {
            state.from_worker_outcome(conn, &request_id, Err(reason))
        }
        Message::Status => {
            let report = state.status_report();
            state.send(conn, report);
        }
        Message::Shutdown => {
            drop(state);
            shutdown_shared(shared);
            return true;
        }
        Message::Pong => {}
        other => {
            let reason = format!("protocol violation: unexpected frame {:?}", std::mem::discriminant(&other));
            state.send(conn, Message::Error { request_id: None, reason });
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_failure_is_reported() {
        let m = master_serve("127.0.0.1:0", SchedulerConfig::default()).unwrap();
        let err = master_serve(m.addr(), SchedulerConfig::default()).err().unwrap();
        assert!(matches!(err, SimnetError::Bind(_)));
        m.shutdown();
        m.wait();
    }
}
