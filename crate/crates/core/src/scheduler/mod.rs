//! Reconciliation and autoscaling.
//!
//! A tick lists the workload manager's jobs, drops routing entries whose job
//! is gone, computes a desired instance count per service from the windowed
//! load, submits jobs to close the gap, probes new instances to readiness,
//! drains instances near their walltime (renewing only what is still
//! needed) and atomically rewrites the routing table.

mod lock;
mod ports;
mod probe;
mod scaling;
mod slurm;
mod spec;
mod swap;
mod tick;

pub use lock::{LockGuard, LockOutcome, SchedulerLock, STALE_AFTER_SECONDS};
pub use ports::pick_port;
pub use probe::{http_status, HttpProber, Prober, PROBE_TIMEOUT};
pub use scaling::desired_instances;
pub use slurm::SlurmCli;
pub use spec::{defaults, validate_all, ServiceSpec, ServicesFile, SpecError};
pub use swap::{ConfigSchedule, ConfigSwapper, ScheduleEntry, TimeOfDay};
pub use tick::{
    probe_instances, renew_expiring, DesiredState, RenewalPlan, Scheduler, SchedulerPaths, ServiceDesired,
    Submission, SubmitReason, TickReport,
};

use thiserror::Error;

use crate::routing::TableError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobState {
    Pending,
    Running,
}

/// One live job as reported by the workload manager's queue listing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobListing {
    pub job_id: String,
    pub state: JobState,
    pub node: Option<String>,
    pub remaining_walltime_s: u64,
}

/// Environment handed to a service job at submission.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubmitEnv {
    pub service: String,
    pub port: u16,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ClusterError {
    #[error("workload manager unreachable: {0}")]
    Unreachable(String),
    #[error("submission failed: {0}")]
    SubmitFailed(String),
    #[error("rejected job template: {0}")]
    RejectedTemplate(String),
    #[error("unknown job {0}")]
    UnknownJob(String),
}

/// The three queue operations the scheduler needs.
pub trait WorkloadManager: Send + Sync {
    fn submit(&self, template: &str, walltime_s: u64, env: &SubmitEnv) -> Result<String, ClusterError>;
    fn list(&self) -> Result<Vec<JobListing>, ClusterError>;
    fn cancel(&self, job_id: &str) -> Result<(), ClusterError>;
}

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("no free port left in range")]
    PortSpaceExhausted,
    #[error("scheduler io: {0}")]
    Io(#[from] std::io::Error),
}
