//! Wire frames: one JSON object per line, UTF-8, terminated by `\n`.
//!
//! Every frame carries a `type` tag. Unknown fields are ignored so newer
//! peers can add fields without breaking older ones.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use tlgrpo_core::surrogate::{ActionVector, TaskDefinition};

use crate::SimnetError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    /// Worker → master, first frame on a worker connection.
    Register {
        worker_id: String,
        task_ids: Vec<String>,
        #[serde(default = "default_capacity")]
        capacity: usize,
    },
    /// Heartbeat from a worker, or a liveness probe from a client.
    Ping {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        worker_id: Option<String>,
    },
    Pong,
    /// Client → master → worker.
    Simulate { request_id: String, task_id: String, variables: BTreeMap<String, f64> },
    /// Worker → master → client.
    Result { request_id: String, metrics: BTreeMap<String, f64> },
    Error {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        request_id: Option<String>,
        reason: String,
    },
    /// Admin → master (stop the service) or master → worker (exit).
    Shutdown,
    /// Admin → master.
    Status,
    /// Master → admin.
    StatusReport { workers: Vec<WorkerStatus>, queued: BTreeMap<String, usize>, running: usize },
}

fn default_capacity() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkerState {
    Idle,
    Busy,
    Dead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerStatus {
    pub worker_id: String,
    pub task_ids: Vec<String>,
    pub state: WorkerState,
    pub in_flight: Vec<String>,
    pub millis_since_heartbeat: u64,
}

impl Message {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("frames serialize");
        s.push('\n');
        s
    }
}

pub fn write_frame(w: &mut impl Write, msg: &Message) -> std::io::Result<()> {
    w.write_all(msg.to_line().as_bytes())?;
    w.flush()
}

/// Reads the next frame; `Ok(None)` on a clean end of stream.
pub fn read_frame(r: &mut impl BufRead) -> Result<Option<Message>, SimnetError> {
    let mut line = String::new();
    loop {
        line.clear();
        if r.read_line(&mut line).map_err(|e| SimnetError::Io(e.to_string()))? == 0 {
            return Ok(None);
        }
        if !line.trim().is_empty() {
            break;
        }
    }
    serde_json::from_str(line.trim_end_matches(['\n', '\r']))
        .map(Some)
        .map_err(|e| SimnetError::Protocol(format!("bad frame: {e}")))
}

/// `{w1: …, wd: …}` for a parameter vector.
pub fn variables_from_params(params: &[f64]) -> BTreeMap<String, f64> {
    params.iter().enumerate().map(|(i, v)| (TaskDefinition::param_name(i), *v)).collect()
}

pub fn params_from_variables(task: &TaskDefinition, vars: &BTreeMap<String, f64>) -> Result<ActionVector, String> {
    if vars.len() != task.dim {
        return Err(format!("expected {} variables, got {}", task.dim, vars.len()));
    }
    (0..task.dim)
        .map(|i| {
            let name = TaskDefinition::param_name(i);
            vars.get(&name).copied().ok_or_else(|| format!("missing variable `{name}`"))
        })
        .collect::<Result<Vec<_>, _>>()
        .map(ActionVector)
}
