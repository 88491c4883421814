//! Simulation service: a master that schedules `simulate` jobs over TCP onto
//! registered workers, a worker runtime, and a blocking client.
//!
//! Frames are newline-delimited JSON (see [`protocol`]). Floats round-trip
//! bit-exactly, so a remote simulation returns the same metrics as a local one.

use std::time::Duration;

use tlgrpo_core::spec_score::MetricVector;
use tlgrpo_core::surrogate::{ActionVector, SimBackend, TaskDefinition};
use tlgrpo_core::EnvError;

pub mod client;
pub mod master;
pub mod protocol;
pub mod worker;

pub use client::SimClient;
pub use master::{master_serve, MasterHandle, SchedulerConfig};
pub use protocol::{Message, WorkerState, WorkerStatus};
pub use worker::{worker_serve, FaultConfig, KillMode, WorkerConfig, WorkerHandle};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimnetError {
    #[error("cannot bind listener: {0}")]
    Bind(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("simulation failed: {0}")]
    SimulationFailed(String),
    #[error("no reply within {0:?}")]
    Timeout(Duration),
    #[error("connection to master closed")]
    Disconnected,
    #[error("master unreachable after {0} attempts")]
    Unreachable(u32),
}

/// [`SimBackend`] that forwards every simulation to a master.
pub struct RemoteSim {
    client: SimClient,
}

impl RemoteSim {
    pub fn new(client: SimClient) -> Self {
        RemoteSim { client }
    }

    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, SimnetError> {
        SimClient::connect(addr, timeout).map(RemoteSim::new)
    }

    pub fn client(&self) -> &SimClient {
        &self.client
    }
}

impl SimBackend for RemoteSim {
    fn simulate(&self, task: &TaskDefinition, params: &ActionVector) -> Result<MetricVector, EnvError> {
        self.client
            .submit(&task.task_id, protocol::variables_from_params(&params.0))
            .map_err(|e| EnvError::Backend(e.to_string()))
    }
}
