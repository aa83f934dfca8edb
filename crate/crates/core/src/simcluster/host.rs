use std::collections::{BTreeMap, HashMap};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::sync::Arc;
use std::time::Duration;

use tokio::sync::Mutex;

use super::{MockProfile, MockServer, SimEvent, SimHandle};

/// Service, port and profile of a job's mock server.
type JobServer = (String, u16, String);

/// Mirrors the simulator's job lifecycle onto real mock servers: a server
/// binds when its job starts, turns healthy when the job is ready and shuts
/// down when the job ends.
pub struct SimHost {
    sim: SimHandle,
    profiles: BTreeMap<String, MockProfile>,
    probe_path: String,
    bind: IpAddr,
    servers: Mutex<HashMap<u64, MockServer>>,
    cursor: Mutex<usize>,
}

impl SimHost {
    pub fn new(sim: SimHandle, profiles: BTreeMap<String, MockProfile>, probe_path: &str) -> Self {
        SimHost {
            sim,
            profiles,
            probe_path: probe_path.to_owned(),
            bind: IpAddr::V4(Ipv4Addr::LOCALHOST),
            servers: Mutex::new(HashMap::new()),
            cursor: Mutex::new(0),
        }
    }

    pub fn sim(&self) -> &SimHandle {
        &self.sim
    }

    fn profile(&self, name: &str) -> MockProfile {
        match self.profiles.get(name) {
            Some(p) => p.clone(),
            None if name == "null" => MockProfile::null(),
            None => MockProfile::default(),
        }
    }

    /// Applies all simulator events not yet seen.
    pub async fn sync(&self) {
        let mut cursor = self.cursor.lock().await;
        let (events, jobs): (Vec<SimEvent>, HashMap<u64, JobServer>) = {
            let sim = self.sim.lock();
            let events = sim.events()[*cursor..].to_vec();
            let jobs = events
                .iter()
                .filter_map(|e| match e {
                    SimEvent::Started { job, .. } => sim
                        .job(*job)
                        .map(|j| (*job, (j.service.clone(), j.port, j.profile.clone()))),
                    _ => None,
                })
                .collect();
            (events, jobs)
        };
        *cursor += events.len();
        let mut servers = self.servers.lock().await;
        for event in events {
            match event {
                SimEvent::Started { job, .. } => {
                    let Some((service, port, profile)) = jobs.get(&job) else {
                        continue;
                    };
                    let addr = SocketAddr::new(self.bind, *port);
                    match MockServer::start(addr, service, self.profile(profile), &self.probe_path, false).await {
                        Ok(server) => {
                            servers.insert(job, server);
                        }
                        Err(e) => tracing::warn!(job, port, error = %e, "mock server failed to bind"),
                    }
                }
                SimEvent::Ready { job, .. } => {
                    if let Some(s) = servers.get(&job) {
                        s.set_ready(true);
                    }
                }
                SimEvent::Expired { job, .. } | SimEvent::Cancelled { job, .. } | SimEvent::Failed { job, .. } => {
                    if let Some(s) = servers.remove(&job) {
                        s.stop().await;
                    }
                }
                SimEvent::Submitted { .. } => {}
            }
        }
    }

    /// Syncs every `period` until the task is aborted.
    pub fn spawn(self: Arc<Self>, period: Duration) -> tokio::task::JoinHandle<()> {
        tokio::spawn(async move {
            let mut interval = tokio::time::interval(period);
            interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                interval.tick().await;
                self.sync().await;
            }
        })
    }

    /// Stops every mock server, e.g. at shutdown.
    pub async fn stop_all(&self) {
        let mut servers = self.servers.lock().await;
        for (_, s) in servers.drain() {
            s.stop().await;
        }
    }

    pub async fn running_servers(&self) -> Vec<(u64, SocketAddr)> {
        let servers = self.servers.lock().await;
        let mut out: Vec<_> = servers.iter().map(|(j, s)| (*j, s.addr())).collect();
        out.sort();
        out
    }

    pub async fn completions(&self, job: u64) -> Option<u64> {
        let servers = self.servers.lock().await;
        servers
            .get(&job)
            .map(|s| s.stats().completions.load(std::sync::atomic::Ordering::Relaxed))
    }
}
