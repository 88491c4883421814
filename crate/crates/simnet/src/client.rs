//! Blocking client over a single master connection. Replies are matched to
//! callers by `request_id`, so one client can be shared across threads.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::BufReader;
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use log::debug;
use tlgrpo_core::spec_score::MetricVector;

use crate::protocol::{read_frame, write_frame, Message};
use crate::SimnetError;

static CLIENT_NONCE: AtomicU64 = AtomicU64::new(0);

struct Inner {
    writer: Mutex<TcpStream>,
    pending: Mutex<HashMap<String, Sender<Message>>>,
    status_waiters: Mutex<VecDeque<Sender<Message>>>,
    closed: AtomicBool,
    next_id: AtomicU64,
    prefix: String,
    timeout: Duration,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

#[derive(Clone)]
pub struct SimClient {
    inner: Arc<Inner>,
}

impl SimClient {
    /// `timeout` bounds how long each call waits for its reply.
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, SimnetError> {
        let stream = TcpStream::connect(addr).map_err(|e| SimnetError::Io(format!("{addr}: {e}")))?;
        let _ = stream.set_nodelay(true);
        let reader = stream.try_clone().map_err(|e| SimnetError::Io(e.to_string()))?;
        let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.subsec_nanos());
        let prefix = format!("c{}-{}-{nanos:x}", std::process::id(), CLIENT_NONCE.fetch_add(1, Ordering::SeqCst));
        let inner = Arc::new(Inner {
            writer: Mutex::new(stream),
            pending: Mutex::new(HashMap::new()),
            status_waiters: Mutex::new(VecDeque::new()),
            closed: AtomicBool::new(false),
            next_id: AtomicU64::new(0),
            prefix,
            timeout,
        });
        let reader_inner = Arc::clone(&inner);
        thread::spawn(move || read_loop(reader_inner, reader));
        Ok(SimClient { inner })
    }

    pub fn submit(&self, task_id: &str, variables: BTreeMap<String, f64>) -> Result<MetricVector, SimnetError> {
        let id = format!("{}-{}", self.inner.prefix, self.inner.next_id.fetch_add(1, Ordering::SeqCst));
        self.submit_with_id(&id, task_id, variables)
    }

    /// Submits under a caller-chosen id; reusing an id that is still pending on this client is refused locally.
    pub fn submit_with_id(&self, request_id: &str, task_id: &str, variables: BTreeMap<String, f64>) -> Result<MetricVector, SimnetError> {
        let (tx, rx) = mpsc::channel();
        {
            let mut pending = lock(&self.inner.pending);
            if pending.contains_key(request_id) {
                return Err(SimnetError::Protocol(format!("request `{request_id}` is already pending")));
            }
            pending.insert(request_id.to_string(), tx);
        }
        let frame = Message::Simulate { request_id: request_id.to_string(), task_id: task_id.to_string(), variables };
        if let Err(e) = self.send(&frame) {
            lock(&self.inner.pending).remove(request_id);
            return Err(e);
        }
        let reply = rx.recv_timeout(self.inner.timeout);
        lock(&self.inner.pending).remove(request_id);
        match reply {
            Ok(Message::Result { metrics, .. }) => Ok(metrics),
            Ok(Message::Error { reason, .. }) => Err(SimnetError::SimulationFailed(reason)),
            Ok(other) => Err(SimnetError::Protocol(format!("unexpected reply {other:?}"))),
            Err(mpsc::RecvTimeoutError::Timeout) => Err(SimnetError::Timeout(self.inner.timeout)),
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(SimnetError::Disconnected),
        }
    }

    /// Current worker table and queue depths.
    pub fn status(&self) -> Result<Message, SimnetError> {
        let (tx, rx) = mpsc::channel();
        lock(&self.inner.status_waiters).push_back(tx);
        self.send(&Message::Status)?;
        rx.recv_timeout(self.inner.timeout).map_err(|_| SimnetError::Timeout(self.inner.timeout))
    }

    /// Asks the master to stop the whole service.
    pub fn shutdown_master(&self) -> Result<(), SimnetError> {
        self.send(&Message::Shutdown)
    }

    fn send(&self, msg: &Message) -> Result<(), SimnetError> {
        if self.inner.closed.load(Ordering::SeqCst) {
            return Err(SimnetError::Disconnected);
        }
        write_frame(&mut *lock(&self.inner.writer), msg).map_err(|e| SimnetError::Io(e.to_string()))
    }
}

impl Drop for Inner {
    fn drop(&mut self) {
        let _ = lock(&self.writer).shutdown(Shutdown::Both);
    }
}

fn read_loop(inner: Arc<Inner>, stream: TcpStream) {
    // Hold only a weak reference so dropping the last client closes the socket.
    let weak = Arc::downgrade(&inner);
    drop(inner);
    let mut reader = BufReader::new(stream);
    loop {
        let frame = read_frame(&mut reader);
        let Some(inner) = weak.upgrade() else { return };
        match frame {
            Ok(Some(msg @ (Message::Result { .. } | Message::Error { request_id: Some(_), .. }))) => {
                let id = match &msg {
                    Message::Result { request_id, .. } | Message::Error { request_id: Some(request_id), .. } => request_id.clone(),
                    _ => unreachable!(),
                };
                match lock(&inner.pending).remove(&id) {
                    Some(tx) => {
                        let _ = tx.send(msg);
                    }
                    None => debug!("reply for unknown request {id}"),
                }
            }
            Ok(Some(msg @ Message::StatusReport { .. })) => {
                if let Some(tx) = lock(&inner.status_waiters).pop_front() {
                    let _ = tx.send(msg);
                }
            }
            Ok(Some(other)) => debug!("client ignoring frame {other:?}"),
            Ok(None) | Err(_) => {
                inner.closed.store(true, Ordering::SeqCst);
                // Dropping the senders wakes every waiter with `Disconnected`.
                lock(&inner.pending).clear();
                lock(&inner.status_waiters).clear();
                return;
            }
        }
    }
}
