use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use serde::Serialize;
use rand_chacha::ChaCha8Rng;

use crate::loadlog::LoadLog;
use crate::routing::{write_atomic, RouteEntry, RouteState, RoutingTable, UNPLACED};
use crate::wire::ServiceName;

use super::{
    defaults, desired_instances, pick_port, ClusterError, JobListing, JobState, LockOutcome,
    Prober, SchedulerError, SchedulerLock, ServiceSpec, SubmitEnv, WorkloadManager,
};

/// Where the scheduler keeps its shared files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchedulerPaths {
    pub table: PathBuf,
    pub desired: PathBuf,
    pub load_dir: PathBuf,
    pub lock: PathBuf,
}

impl SchedulerPaths {
    pub fn in_dir(dir: &Path) -> Self {
        SchedulerPaths {
            table: dir.join("routes"),
            desired: dir.join("desired"),
            load_dir: dir.join("load"),
            lock: dir.join("scheduler.lock"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ServiceDesired {
    pub desired: u32,
    pub avg_concurrency: f64,
}

/// Per-service desired counts, persisted for the interface's pong.
/// One line per service: `name desired avg_concurrency`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DesiredState {
    pub services: BTreeMap<String, ServiceDesired>,
}

impl DesiredState {
    pub fn render(&self) -> String {
        self.services
            .iter()
            .map(|(name, d)| format!("{name} {} {:.6}\n", d.desired, d.avg_concurrency))
            .collect()
    }

    pub fn parse(text: &str) -> DesiredState {
        let mut services = BTreeMap::new();
        for line in text.lines() {
            let mut parts = line.split(' ');
            let (Some(name), Some(desired), Some(avg)) = (parts.next(), parts.next(), parts.next())
            else {
                continue;
            };
            if !ServiceName::is_valid(name) {
                continue;
            }
            if let (Ok(desired), Ok(avg_concurrency)) = (desired.parse(), avg.parse()) {
                services.insert(
                    name.to_owned(),
                    ServiceDesired {
                        desired,
                        avg_concurrency,
                    },
                );
            }
        }
        DesiredState { services }
    }

    pub fn load(path: &Path) -> DesiredState {
        std::fs::read_to_string(path)
            .map(|t| Self::parse(&t))
            .unwrap_or_default()
    }

    pub fn store(&self, path: &Path) -> std::io::Result<()> {
        write_atomic(path, self.render().as_bytes())
    }

    pub fn desired(&self, service: &str) -> u32 {
        self.services.get(service).map_or(0, |d| d.desired)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmitReason {
    ScaleUp,
    Renewal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Submission {
    pub service: String,
    pub job_id: String,
    pub port: u16,
    pub reason: SubmitReason,
}

/// What one tick did.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TickReport {
    pub now_ms: u64,
    pub desired: BTreeMap<String, ServiceDesired>,
    pub submitted: Vec<Submission>,
    /// Entries dropped because their job left the queue listing.
    pub vanished: Vec<String>,
    pub started: Vec<String>,
    pub ready: Vec<String>,
    /// Instances cancelled after exceeding the startup timeout.
    pub timed_out: Vec<String>,
    pub drained: Vec<String>,
    pub errors: Vec<String>,
}

impl TickReport {
    pub fn desired_count(&self, service: &str) -> u32 {
        self.desired.get(service).map_or(0, |d| d.desired)
    }
}

pub struct Scheduler {
    paths: SchedulerPaths,
    cluster: Arc<dyn WorkloadManager>,
    prober: Arc<dyn Prober + Send>,
    rng: Mutex<ChaCha8Rng>,
}

impl Scheduler {
    pub fn new(
        paths: SchedulerPaths,
        cluster: Arc<dyn WorkloadManager>,
        prober: Arc<dyn Prober + Send>,
        seed: Option<u64>,
    ) -> Self {
        let rng = match seed {
            Some(s) => ChaCha8Rng::seed_from_u64(s),
            None => ChaCha8Rng::from_os_rng(),
        };
        Scheduler {
            paths,
            cluster,
            prober,
            rng: Mutex::new(rng),
        }
    }

    pub fn paths(&self) -> &SchedulerPaths {
        &self.paths
    }

    /// Takes the lock and ticks; `None` when another tick holds the lock.
    pub fn run_tick(&self, specs: &[ServiceSpec], now_ms: u64) -> Result<Option<TickReport>, SchedulerError> {
        let lock = SchedulerLock::new(&self.paths.lock);
        match lock.acquire(now_ms / 1000) {
            LockOutcome::Busy => Ok(None),
            LockOutcome::Held(_guard) => self.tick(specs, now_ms).map(Some),
        }
    }

    /// One reconciliation pass. The caller must hold the lock.
    pub fn tick(&self, specs: &[ServiceSpec], now_ms: u64) -> Result<TickReport, SchedulerError> {
        let now_s = now_ms / 1000;
        let mut report = TickReport {
            now_ms,
            ..TickReport::default()
        };

        let listings = self.cluster.list()?;
        let jobs: HashMap<&str, &JobListing> =
            listings.iter().map(|j| (j.job_id.as_str(), j)).collect();
        let mut table = RoutingTable::load(&self.paths.table)?;

        table.entries.retain(|e| {
            let listed = jobs.contains_key(e.job_id.as_str());
            if !listed {
                report.vanished.push(e.job_id.clone());
            }
            listed
        });

        let load = LoadLog::new(&self.paths.load_dir);
        for spec in specs {
            let window = load.average(&spec.name, spec.window_seconds * 1000, now_ms);
            let avg = window.mean();
            report.desired.insert(
                spec.name.clone(),
                ServiceDesired {
                    desired: desired_instances(avg, spec),
                    avg_concurrency: avg,
                },
            );
        }
        // services dropped from the config wind down with nothing renewed
        for e in &table.entries {
            report
                .desired
                .entry(e.service.as_str().to_owned())
                .or_insert(ServiceDesired {
                    desired: 0,
                    avg_concurrency: 0.0,
                });
        }
        let desired: BTreeMap<String, u32> = report
            .desired
            .iter()
            .map(|(k, v)| (k.clone(), v.desired))
            .collect();

        for spec in specs {
            let live = live_count(&table, spec, &jobs);
            let want = desired[&spec.name];
            for _ in live..want {
                if !self.submit(spec, &mut table, now_s, SubmitReason::ScaleUp, &mut report) {
                    break;
                }
            }
        }

        probe_instances(
            &mut table,
            &jobs,
            specs,
            self.prober.as_ref(),
            self.cluster.as_ref(),
            now_s,
            &mut report,
        );

        let plan = renew_expiring(&mut table, &jobs, specs, &desired, now_s);
        report.drained.extend(plan.drained);
        for (service, count) in plan.replacements {
            let Some(spec) = specs.iter().find(|s| s.name == service) else {
                continue;
            };
            for _ in 0..count {
                if !self.submit(spec, &mut table, now_s, SubmitReason::Renewal, &mut report) {
                    break;
                }
            }
        }

        table.store(&self.paths.table)?;
        DesiredState {
            services: report.desired.clone(),
        }
        .store(&self.paths.desired)?;
        Ok(report)
    }

    fn submit(
        &self,
        spec: &ServiceSpec,
        table: &mut RoutingTable,
        now_s: u64,
        reason: SubmitReason,
        report: &mut TickReport,
    ) -> bool {
        let port = {
            let mut rng = self.rng.lock().expect("rng lock");
            match pick_port(table, spec.port_range, &mut *rng) {
                Ok(p) => p,
                Err(e) => {
                    report.errors.push(format!("{}: {e}", spec.name));
                    return false;
                }
            }
        };
        let env = SubmitEnv {
            service: spec.name.clone(),
            port,
        };
        match self
            .cluster
            .submit(&spec.job_template, spec.walltime_seconds, &env)
        {
            Ok(job_id) => {
                tracing::info!(service = %spec.name, %job_id, port, ?reason, "submitted");
                table.entries.push(RouteEntry {
                    job_id: job_id.clone(),
                    service: spec.service_name(),
                    node: UNPLACED.into(),
                    port,
                    state: RouteState::Submitted,
                    updated_at: now_s,
                });
                report.submitted.push(Submission {
                    service: spec.name.clone(),
                    job_id,
                    port,
                    reason,
                });
                true
            }
            Err(e) => {
                tracing::warn!(service = %spec.name, error = %e, "submission failed");
                report.errors.push(format!("{}: {e}", spec.name));
                false
            }
        }
    }
}

fn margin_for(specs: &[ServiceSpec], service: &str) -> u64 {
    specs
        .iter()
        .find(|s| s.name == service)
        .map_or(defaults::renewal_margin_seconds(), |s| s.renewal_margin_seconds)
}

fn near_expiry(entry: &RouteEntry, jobs: &HashMap<&str, &JobListing>, margin: u64) -> bool {
    jobs.get(entry.job_id.as_str())
        .is_some_and(|j| j.remaining_walltime_s < margin)
}

/// Instances that count toward the desired number: submitted, starting or
/// ready, and not inside the renewal margin.
fn live_count(table: &RoutingTable, spec: &ServiceSpec, jobs: &HashMap<&str, &JobListing>) -> u32 {
    table
        .for_service(&spec.name)
        .filter(|e| e.state != RouteState::Draining)
        .filter(|e| !near_expiry(e, jobs, spec.renewal_margin_seconds))
        .count() as u32
}

/// Moves placed jobs to STARTING, probes starting instances and promotes
/// healthy ones to READY. Instances still failing their probe past the
/// startup timeout are cancelled and dropped.
pub fn probe_instances(
    table: &mut RoutingTable,
    jobs: &HashMap<&str, &JobListing>,
    specs: &[ServiceSpec],
    prober: &dyn Prober,
    cluster: &dyn WorkloadManager,
    now_s: u64,
    report: &mut TickReport,
) {
    for e in table.entries.iter_mut() {
        if e.state != RouteState::Submitted {
            continue;
        }
        let Some(job) = jobs.get(e.job_id.as_str()) else {
            continue;
        };
        if let (JobState::Running, Some(node)) = (job.state, job.node.as_ref()) {
            e.state = RouteState::Starting;
            e.node = node.clone();
            e.updated_at = now_s;
            report.started.push(e.job_id.clone());
        }
    }

    let targets: Vec<(usize, String, u16, String)> = table
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.state == RouteState::Starting)
        .map(|(i, e)| {
            let path = specs
                .iter()
                .find(|s| s.name == e.service.as_str())
                .map_or_else(defaults::probe_path, |s| s.probe_path.clone());
            (i, e.node.clone(), e.port, path)
        })
        .collect();
    let results: Vec<bool> = if targets.len() <= 1 {
        targets
            .iter()
            .map(|(_, node, port, path)| prober.probe(node, *port, path))
            .collect()
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = targets
                .iter()
                .map(|(_, node, port, path)| s.spawn(move || prober.probe(node, *port, path)))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap_or(false)).collect()
        })
    };

    let mut expired = Vec::new();
    for ((idx, ..), healthy) in targets.iter().zip(results) {
        let e = &mut table.entries[*idx];
        if healthy {
            e.state = RouteState::Ready;
            e.updated_at = now_s;
            report.ready.push(e.job_id.clone());
            continue;
        }
        let timeout = specs
            .iter()
            .find(|s| s.name == e.service.as_str())
            .map_or(defaults::startup_timeout_seconds(), |s| s.startup_timeout_seconds);
        if now_s.saturating_sub(e.updated_at) > timeout {
            expired.push(*idx);
        }
    }
    for idx in expired.into_iter().rev() {
        let e = table.entries.remove(idx);
        tracing::warn!(job_id = %e.job_id, service = %e.service, "startup timeout, cancelling");
        match cluster.cancel(&e.job_id) {
            Ok(()) | Err(ClusterError::UnknownJob(_)) => {}
            Err(err) => report.errors.push(format!("cancel {}: {err}", e.job_id)),
        }
        report.timed_out.push(e.job_id);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RenewalPlan {
    pub drained: Vec<String>,
    pub replacements: Vec<(String, u32)>,
}

/// Drains READY instances inside their renewal margin and returns how many
/// replacements each service needs: one per drained instance, only while
/// the non-draining live count is below the desired count. Nothing here
/// ever cancels a job.
pub fn renew_expiring(
    table: &mut RoutingTable,
    jobs: &HashMap<&str, &JobListing>,
    specs: &[ServiceSpec],
    desired: &BTreeMap<String, u32>,
    now_s: u64,
) -> RenewalPlan {
    let mut plan = RenewalPlan::default();
    let mut drained: BTreeMap<String, u32> = BTreeMap::new();
    for e in table.entries.iter_mut() {
        if e.state != RouteState::Ready {
            continue;
        }
        if near_expiry(e, jobs, margin_for(specs, e.service.as_str())) {
            e.state = RouteState::Draining;
            e.updated_at = now_s;
            plan.drained.push(e.job_id.clone());
            *drained.entry(e.service.as_str().to_owned()).or_default() += 1;
        }
    }
    for (service, count) in drained {
        let want = desired.get(&service).copied().unwrap_or(0);
        let live = table
            .for_service(&service)
            .filter(|e| e.state != RouteState::Draining)
            .filter(|e| !near_expiry(e, jobs, margin_for(specs, &service)))
            .count() as u32;
        let replacements = want.saturating_sub(live).min(count);
        if replacements > 0 {
            plan.replacements.push((service, replacements));
        }
    }
    plan
}

#[cfg(test)]
mod tests {
    use super::*;

    fn listing(id: &str, remaining: u64) -> JobListing {
        JobListing {
            job_id: id.into(),
            state: JobState::Running,
            node: Some("gpu01".into()),
            remaining_walltime_s: remaining,
        }
    }

    fn ready(id: &str, port: u16) -> RouteEntry {
        RouteEntry {
            job_id: id.into(),
            service: ServiceName::new("m").unwrap(),
            node: "gpu01".into(),
            port,
            state: RouteState::Ready,
            updated_at: 0,
        }
    }

    fn run(table: &mut RoutingTable, listings: &[JobListing], desired: u32) -> u32 {
        let jobs: HashMap<&str, &JobListing> =
            listings.iter().map(|j| (j.job_id.as_str(), j)).collect();
        let specs = [ServiceSpec::new("m", "t")];
        let desired = BTreeMap::from([("m".to_string(), desired)]);
        renew_expiring(table, &jobs, &specs, &desired, 100)
            .replacements
            .iter()
            .map(|(_, n)| *n)
            .sum()
    }

    #[test]
    fn both_near_expiry_both_replaced() {
        let mut table = RoutingTable {
            entries: vec![ready("1", 20000), ready("2", 20001)],
        };
        let n = run(&mut table, &[listing("1", 60), listing("2", 60)], 2);
        assert_eq!(n, 2);
        assert!(table.entries.iter().all(|e| e.state == RouteState::Draining));
    }

    #[test]
    fn excess_expires_without_renewal() {
        let mut table = RoutingTable {
            entries: vec![ready("1", 20000), ready("2", 20001)],
        };
        let n = run(&mut table, &[listing("1", 60), listing("2", 10_000)], 1);
        assert_eq!(n, 0);
        assert_eq!(table.get("1").unwrap().state, RouteState::Draining);
        assert_eq!(table.get("2").unwrap().state, RouteState::Ready);
    }

    #[test]
    fn scale_to_zero_by_non_renewal() {
        let mut table = RoutingTable {
            entries: vec![ready("1", 20000), ready("2", 20001)],
        };
        assert_eq!(run(&mut table, &[listing("1", 5), listing("2", 5)], 0), 0);
    }

    #[test]
    fn desired_state_roundtrip() {
        let mut state = DesiredState::default();
        state.services.insert(
            "qwen2-72b".into(),
            ServiceDesired {
                desired: 2,
                avg_concurrency: 5.5,
            },
        );
        assert_eq!(DesiredState::parse(&state.render()), state);
        assert_eq!(DesiredState::parse("bad line\nx;y 1 2\n").services.len(), 0);
    }
}
