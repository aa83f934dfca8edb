//! Workload-manager simulator and mock model servers.
//!
//! [`SimCluster`] is a virtual-time queue with node/GPU accounting. Wrapped
//! in a [`SimHandle`] it implements the scheduler's [`WorkloadManager`] and
//! [`Prober`] traits; in real-time mode the handle follows the wall clock
//! and a [`SimHost`] starts a [`MockServer`] for every running job.

mod cluster;
mod host;
mod mock;
mod scenario;
mod template;

pub use cluster::{Fault, SimCluster, SimEvent, SimJob, SimJobState, SimNode, Topology};
pub use host::SimHost;
pub use mock::{mock_model_serve, MockProfile, MockServer, MockStats, MOCK_TOKENS};
pub use scenario::{
    replay, LoadStep, RunSection, Scenario, ScenarioFault, ScenarioReport, ScenarioRun, ScheduleSpec, ServiceSample,
    TickSample,
};
pub use template::{JobTemplate, DEFAULT_PROFILE};

use std::sync::{Arc, Mutex, MutexGuard};

use crate::scheduler::{ClusterError, JobListing, Prober, SubmitEnv, WorkloadManager};

/// Shared access to one simulator. Clones refer to the same cluster.
#[derive(Debug, Clone)]
pub struct SimHandle {
    inner: Arc<Mutex<SimCluster>>,
    realtime: bool,
}

impl SimHandle {
    /// Virtual time: moves only through [`SimCluster::advance`].
    pub fn virtual_time(cluster: SimCluster) -> Self {
        SimHandle {
            inner: Arc::new(Mutex::new(cluster)),
            realtime: false,
        }
    }

    /// Real time: every access first advances to the wall clock.
    pub fn real_time(topology: &Topology) -> Self {
        SimHandle {
            inner: Arc::new(Mutex::new(SimCluster::new(topology, crate::clock::now_ms()))),
            realtime: true,
        }
    }

    pub fn lock(&self) -> MutexGuard<'_, SimCluster> {
        let mut guard = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        if self.realtime {
            let now = crate::clock::now_ms().max(guard.now_ms());
            guard.advance_to(now);
        }
        guard
    }

    pub fn is_realtime(&self) -> bool {
        self.realtime
    }
}

impl WorkloadManager for SimHandle {
    fn submit(&self, template: &str, walltime_s: u64, env: &SubmitEnv) -> Result<String, ClusterError> {
        self.lock().submit(template, walltime_s, env)
    }

    fn list(&self) -> Result<Vec<JobListing>, ClusterError> {
        self.lock().list()
    }

    fn cancel(&self, job_id: &str) -> Result<(), ClusterError> {
        self.lock().cancel(job_id)
    }
}

/// Probes answer from the simulated readiness schedule, no network.
impl Prober for SimHandle {
    fn probe(&self, node: &str, port: u16, _path: &str) -> bool {
        let sim = self.lock();
        sim.job_at(node, port).is_some_and(|j| sim.is_ready(j.id))
    }
}
