use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::scheduler::{ClusterError, JobListing, JobState, SubmitEnv};

use super::template::JobTemplate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    #[serde(default = "Topology::default_nodes")]
    pub nodes: u32,
    #[serde(default = "Topology::default_gpus")]
    pub gpus_per_node: u32,
    #[serde(default = "Topology::default_delay")]
    pub scheduling_delay_s: f64,
}

impl Topology {
    fn default_nodes() -> u32 {
        10
    }
    fn default_gpus() -> u32 {
        4
    }
    fn default_delay() -> f64 {
        3.0
    }

    pub fn node_name(i: u32) -> String {
        format!("gpu{:02}", i + 1)
    }
}

impl Default for Topology {
    fn default() -> Self {
        Topology {
            nodes: Self::default_nodes(),
            gpus_per_node: Self::default_gpus(),
            scheduling_delay_s: Self::default_delay(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimNode {
    pub name: String,
    pub gpus_total: u32,
    pub gpus_free: u32,
    pub healthy: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SimJobState {
    Pending,
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimJob {
    pub id: u64,
    pub service: String,
    pub port: u16,
    pub gpus_requested: u32,
    pub profile: String,
    pub state: SimJobState,
    pub node: Option<usize>,
    pub submit_ms: u64,
    pub start_ms: Option<u64>,
    pub end_ms: Option<u64>,
    pub walltime_ms: u64,
    pub cold_start_ms: u64,
    pub never_ready: bool,
}

impl SimJob {
    pub fn ready_at(&self) -> Option<u64> {
        if self.never_ready {
            return None;
        }
        self.start_ms.map(|s| s + self.cold_start_ms)
    }

    fn expires_at(&self) -> Option<u64> {
        self.start_ms.map(|s| s + self.walltime_ms)
    }
}

/// Trace of everything that happened, in time order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SimEvent {
    Submitted { at_ms: u64, job: u64 },
    Started { at_ms: u64, job: u64, node: String },
    Ready { at_ms: u64, job: u64 },
    Expired { at_ms: u64, job: u64 },
    Cancelled { at_ms: u64, job: u64, was_ready: bool },
    Failed { at_ms: u64, job: u64 },
}

impl SimEvent {
    pub fn job(&self) -> u64 {
        match *self {
            SimEvent::Submitted { job, .. }
            | SimEvent::Started { job, .. }
            | SimEvent::Ready { job, .. }
            | SimEvent::Expired { job, .. }
            | SimEvent::Cancelled { job, .. }
            | SimEvent::Failed { job, .. } => job,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fault {
    /// Marks the node unhealthy and fails every job on it.
    NodeKill { node: String },
    NodeRestore { node: String },
    /// The job starts but never answers its health probe. May name a job
    /// id that has not been submitted yet.
    NeverReady { job: u64 },
    /// The queue commands fail until cleared.
    Unreachable { down: bool },
}

/// Virtual-time workload-manager simulator with queue semantics:
/// FIFO within identical GPU requests, a fixed scheduling delay, walltime
/// expiry and a per-job cold start before the instance turns healthy.
#[derive(Debug, Clone)]
pub struct SimCluster {
    nodes: Vec<SimNode>,
    jobs: BTreeMap<u64, SimJob>,
    now_ms: u64,
    scheduling_delay_ms: u64,
    next_id: u64,
    events: Vec<SimEvent>,
    ready_emitted: HashSet<u64>,
    never_ready: HashSet<u64>,
    unreachable: bool,
}

impl SimCluster {
    pub fn new(topology: &Topology, start_ms: u64) -> SimCluster {
        let nodes = (0..topology.nodes)
            .map(|i| SimNode {
                name: Topology::node_name(i),
                gpus_total: topology.gpus_per_node,
                gpus_free: topology.gpus_per_node,
                healthy: true,
            })
            .collect();
        SimCluster {
            nodes,
            jobs: BTreeMap::new(),
            now_ms: start_ms,
            scheduling_delay_ms: (topology.scheduling_delay_s * 1000.0).round() as u64,
            next_id: 1,
            events: Vec::new(),
            ready_emitted: HashSet::new(),
            never_ready: HashSet::new(),
            unreachable: false,
        }
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    pub fn nodes(&self) -> &[SimNode] {
        &self.nodes
    }

    pub fn jobs(&self) -> impl Iterator<Item = &SimJob> {
        self.jobs.values()
    }

    pub fn job(&self, id: u64) -> Option<&SimJob> {
        self.jobs.get(&id)
    }

    pub fn events(&self) -> &[SimEvent] {
        &self.events
    }

    pub fn node_name(&self, job: &SimJob) -> Option<&str> {
        job.node.map(|i| self.nodes[i].name.as_str())
    }

    pub fn submit(&mut self, template: &str, walltime_s: u64, env: &SubmitEnv) -> Result<String, ClusterError> {
        if self.unreachable {
            return Err(ClusterError::SubmitFailed("cluster unreachable".into()));
        }
        let tpl = JobTemplate::parse(template).map_err(ClusterError::RejectedTemplate)?;
        let id = self.next_id;
        self.next_id += 1;
        self.jobs.insert(
            id,
            SimJob {
                id,
                service: env.service.clone(),
                port: env.port,
                gpus_requested: tpl.gpus,
                profile: tpl.profile,
                state: SimJobState::Pending,
                node: None,
                submit_ms: self.now_ms,
                start_ms: None,
                end_ms: None,
                walltime_ms: walltime_s * 1000,
                cold_start_ms: tpl.cold_start_ms,
                never_ready: self.never_ready.contains(&id),
            },
        );
        self.events.push(SimEvent::Submitted { at_ms: self.now_ms, job: id });
        self.start_eligible();
        Ok(id.to_string())
    }

    /// PENDING and RUNNING jobs only, as a queue listing would show them.
    pub fn list(&self) -> Result<Vec<JobListing>, ClusterError> {
        if self.unreachable {
            return Err(ClusterError::Unreachable("cluster unreachable".into()));
        }
        Ok(self
            .jobs
            .values()
            .filter_map(|j| {
                let (state, remaining_ms) = match j.state {
                    SimJobState::Pending => (JobState::Pending, j.walltime_ms),
                    SimJobState::Running => (
                        JobState::Running,
                        j.expires_at().unwrap_or(0).saturating_sub(self.now_ms),
                    ),
                    _ => return None,
                };
                Some(JobListing {
                    job_id: j.id.to_string(),
                    state,
                    node: self.node_name(j).map(str::to_owned),
                    remaining_walltime_s: remaining_ms / 1000,
                })
            })
            .collect())
    }

    /// Unknown ids are a logged no-op, like cancelling an already-finished job.
    pub fn cancel(&mut self, job_id: &str) -> Result<(), ClusterError> {
        let Some(id) = job_id.parse::<u64>().ok().filter(|id| self.jobs.contains_key(id)) else {
            tracing::debug!(job_id, "cancel of unknown job ignored");
            return Ok(());
        };
        let now = self.now_ms;
        let was_ready = self.is_ready(id);
        let job = &self.jobs[&id];
        if !matches!(job.state, SimJobState::Pending | SimJobState::Running) {
            return Ok(());
        }
        self.finish(id, SimJobState::Completed);
        self.events.push(SimEvent::Cancelled { at_ms: now, job: id, was_ready });
        self.start_eligible();
        Ok(())
    }

    pub fn inject_fault(&mut self, fault: &Fault) {
        match fault {
            Fault::NodeKill { node } => {
                let Some(idx) = self.nodes.iter().position(|n| &n.name == node) else {
                    return;
                };
                let victims: Vec<u64> = self
                    .jobs
                    .values()
                    .filter(|j| j.state == SimJobState::Running && j.node == Some(idx))
                    .map(|j| j.id)
                    .collect();
                for id in victims {
                    self.finish(id, SimJobState::Failed);
                    self.events.push(SimEvent::Failed { at_ms: self.now_ms, job: id });
                }
                let n = &mut self.nodes[idx];
                n.healthy = false;
                n.gpus_free = 0;
            }
            Fault::NodeRestore { node } => {
                if let Some(n) = self.nodes.iter_mut().find(|n| &n.name == node) {
                    if !n.healthy {
                        n.healthy = true;
                        n.gpus_free = n.gpus_total;
                    }
                }
                self.start_eligible();
            }
            Fault::NeverReady { job } => {
                self.never_ready.insert(*job);
                if let Some(j) = self.jobs.get_mut(job) {
                    j.never_ready = true;
                }
            }
            Fault::Unreachable { down } => self.unreachable = *down,
        }
    }

    pub fn is_ready(&self, id: u64) -> bool {
        self.jobs.get(&id).is_some_and(|j| {
            j.state == SimJobState::Running && j.ready_at().is_some_and(|r| r <= self.now_ms)
        })
    }

    /// The running job holding `port` on `node`, if any.
    pub fn job_at(&self, node: &str, port: u16) -> Option<&SimJob> {
        self.jobs.values().find(|j| {
            j.state == SimJobState::Running && j.port == port && self.node_name(j) == Some(node)
        })
    }

    pub fn advance(&mut self, dt_ms: u64) {
        self.advance_to(self.now_ms + dt_ms);
    }

    /// Moves virtual time forward, firing expiries, readiness and starts in
    /// time order.
    pub fn advance_to(&mut self, target_ms: u64) {
        if target_ms < self.now_ms {
            return;
        }
        loop {
            self.start_eligible();
            let Some(next) = self.next_event_time().filter(|&t| t <= target_ms) else {
                break;
            };
            self.now_ms = next;
            self.fire_due();
        }
        self.now_ms = target_ms;
        self.start_eligible();
    }

    fn next_event_time(&self) -> Option<u64> {
        let now = self.now_ms;
        self.jobs
            .values()
            .filter_map(|j| match j.state {
                SimJobState::Running => {
                    let expiry = j.expires_at();
                    let ready = j.ready_at().filter(|_| !self.ready_emitted.contains(&j.id));
                    match (expiry, ready) {
                        (Some(e), Some(r)) if r < e => Some(r),
                        (e, _) => e,
                    }
                }
                SimJobState::Pending => {
                    let eligible = j.submit_ms + self.scheduling_delay_ms;
                    (eligible > now).then_some(eligible)
                }
                _ => None,
            })
            .filter(|&t| t > now || t == now && self.has_due_at(t))
            .min()
    }

    fn has_due_at(&self, t: u64) -> bool {
        self.jobs.values().any(|j| {
            j.state == SimJobState::Running
                && (j.expires_at() == Some(t)
                    || (j.ready_at() == Some(t) && !self.ready_emitted.contains(&j.id)))
        })
    }

    fn fire_due(&mut self) {
        let now = self.now_ms;
        let expired: Vec<u64> = self
            .jobs
            .values()
            .filter(|j| j.state == SimJobState::Running && j.expires_at().is_some_and(|e| e <= now))
            .map(|j| j.id)
            .collect();
        for id in expired {
            self.finish(id, SimJobState::Completed);
            self.events.push(SimEvent::Expired { at_ms: now, job: id });
        }
        let ready: Vec<u64> = self
            .jobs
            .values()
            .filter(|j| {
                j.state == SimJobState::Running
                    && !self.ready_emitted.contains(&j.id)
                    && j.ready_at().is_some_and(|r| r <= now)
            })
            .map(|j| j.id)
            .collect();
        for id in ready {
            self.ready_emitted.insert(id);
            self.events.push(SimEvent::Ready { at_ms: now, job: id });
        }
    }

    fn finish(&mut self, id: u64, state: SimJobState) {
        let now = self.now_ms;
        let Some(job) = self.jobs.get_mut(&id) else {
            return;
        };
        if job.state == SimJobState::Running {
            if let Some(idx) = job.node {
                let node = &mut self.nodes[idx];
                if node.healthy {
                    node.gpus_free += job.gpus_requested;
                }
            }
        }
        job.state = state;
        job.end_ms = Some(now);
    }

    /// Starts pending jobs whose scheduling delay has passed, oldest first;
    /// a job that cannot be placed blocks later jobs of the same shape.
    fn start_eligible(&mut self) {
        let now = self.now_ms;
        let mut blocked: HashSet<u32> = HashSet::new();
        let pending: Vec<u64> = self
            .jobs
            .values()
            .filter(|j| j.state == SimJobState::Pending)
            .map(|j| j.id)
            .collect();
        for id in pending {
            let job = &self.jobs[&id];
            let shape = job.gpus_requested;
            if blocked.contains(&shape) {
                continue;
            }
            if job.submit_ms + self.scheduling_delay_ms > now {
                blocked.insert(shape);
                continue;
            }
            let Some(idx) = self
                .nodes
                .iter()
                .position(|n| n.healthy && n.gpus_free >= shape)
            else {
                blocked.insert(shape);
                continue;
            };
            self.nodes[idx].gpus_free -= shape;
            let job = self.jobs.get_mut(&id).expect("pending job");
            job.state = SimJobState::Running;
            job.node = Some(idx);
            job.start_ms = Some(now);
            self.events.push(SimEvent::Started {
                at_ms: now,
                job: id,
                node: self.nodes[idx].name.clone(),
            });
        }
    }

    /// Free plus reserved GPUs equal the total across healthy nodes.
    pub fn conserves_gpus(&self) -> bool {
        let healthy: Vec<usize> = (0..self.nodes.len()).filter(|&i| self.nodes[i].healthy).collect();
        let free: u32 = healthy.iter().map(|&i| self.nodes[i].gpus_free).sum();
        let total: u32 = healthy.iter().map(|&i| self.nodes[i].gpus_total).sum();
        let reserved: u32 = self
            .jobs
            .values()
            .filter(|j| j.state == SimJobState::Running)
            .map(|j| {
                let idx = j.node.expect("running job has a node");
                assert!(self.nodes[idx].healthy, "running job on unhealthy node");
                j.gpus_requested
            })
            .sum();
        free + reserved == total
    }
}
