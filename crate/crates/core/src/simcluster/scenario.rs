//! Declarative virtual-time scenarios: a topology, services, a load trace,
//! faults and an optional day/night config schedule, replayed against the
//! real scheduler.
//!
//! ```toml
//! [topology]
//! nodes = 10
//! gpus_per_node = 4
//! scheduling_delay_s = 3.0
//!
//! [run]
//! duration_s = 3600
//! tick_s = 5
//! start_s = 0       # virtual epoch seconds of the first tick
//! seed = 1
//!
//! [[services]]
//! name = "m"
//! job_template = "gpus=1 cold_start=60"
//!
//! [[load]]           # concurrency level from at_s on
//! at_s = 0
//! service = "m"
//! concurrency = 8
//!
//! [[faults]]
//! at_s = 600
//! kind = "node_kill"  # node_restore, never_ready (job = id), unreachable (down = bool)
//! node = "gpu01"
//!
//! [[schedule]]       # replaces [[services]]; paths relative to this file
//! at = "08:00"
//! services = "day.toml"
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::loadlog::{LoadEvent, LoadLog};
use crate::routing::{RouteState, RoutingTable};
use crate::scheduler::{
    validate_all, ConfigSchedule, ConfigSwapper, ScheduleEntry, Scheduler, SchedulerPaths, ServiceSpec, TickReport,
};

use super::{Fault, SimCluster, SimEvent, SimHandle, SimJobState, Topology};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub duration_s: u64,
    #[serde(default = "RunSection::default_tick")]
    pub tick_s: f64,
    #[serde(default)]
    pub start_s: u64,
    #[serde(default)]
    pub seed: u64,
}

impl RunSection {
    fn default_tick() -> f64 {
        5.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadStep {
    pub at_s: f64,
    pub service: String,
    pub concurrency: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFault {
    pub at_s: f64,
    #[serde(flatten)]
    pub fault: Fault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub at: String,
    pub services: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub topology: Topology,
    pub run: RunSection,
    #[serde(default)]
    pub services: Vec<ServiceSpec>,
    #[serde(default)]
    pub schedule: Vec<ScheduleSpec>,
    #[serde(default)]
    pub load: Vec<LoadStep>,
    #[serde(default)]
    pub faults: Vec<ScenarioFault>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, String> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| e.to_string())?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Scenario, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut scenario = Scenario::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        scenario.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(scenario)
    }

    fn validate(&self) -> Result<(), String> {
        if !(self.run.tick_s.is_finite() && self.run.tick_s >= 0.001) {
            return Err("run.tick_s must be at least 0.001".into());
        }
        if self.topology.nodes == 0 || self.topology.gpus_per_node == 0 {
            return Err("topology needs at least one node and one GPU".into());
        }
        if !(self.topology.scheduling_delay_s.is_finite() && self.topology.scheduling_delay_s >= 0.0) {
            return Err("topology.scheduling_delay_s must be non-negative".into());
        }
        validate_all(&self.services).map_err(|e| e.to_string())?;
        if !self.schedule.is_empty() && !self.services.is_empty() {
            return Err("use either [[services]] or [[schedule]], not both".into());
        }
        for step in &self.load {
            if !(step.at_s.is_finite() && step.at_s >= 0.0) {
                return Err(format!("load step at {} has a bad time", step.at_s));
            }
            if self.schedule.is_empty() && !self.services.iter().any(|s| s.name == step.service) {
                return Err(format!("load step names unknown service {:?}", step.service));
            }
        }
        for f in &self.faults {
            if !(f.at_s.is_finite() && f.at_s >= 0.0) {
                return Err(format!("fault at {} has a bad time", f.at_s));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ServiceSample {
    pub desired: u32,
    pub avg_concurrency: f64,
    pub ready: u32,
    pub draining: u32,
    /// PENDING or RUNNING jobs of the service in the simulator.
    pub live_jobs: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TickSample {
    pub at_ms: u64,
    pub services: BTreeMap<String, ServiceSample>,
    pub max_port_multiplicity: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub ticks: Vec<TickSample>,
    pub events: Vec<SimEvent>,
    pub submissions: usize,
    pub ready_cancellations: usize,
    pub startup_cancellations: usize,
    pub errors: Vec<String>,
    pub conservation_held: bool,
}

enum SpecSource {
    Static(Vec<ServiceSpec>),
    Swapped(ConfigSwapper),
}

/// A scenario being replayed; drive it tick by tick or all at once.
pub struct ScenarioRun {
    sim: SimHandle,
    scheduler: Scheduler,
    specs: SpecSource,
    load: LoadLog,
    levels: BTreeMap<String, u32>,
    pending_load: Vec<LoadStep>,
    pending_faults: Vec<ScenarioFault>,
    now_ms: u64,
    start_ms: u64,
    end_ms: u64,
    tick_ms: u64,
    ticks: Vec<TickSample>,
    reports: Vec<TickReport>,
    conservation_held: bool,
}

impl ScenarioRun {
    pub fn new(scenario: &Scenario, state_dir: &Path) -> Result<ScenarioRun, String> {
        std::fs::create_dir_all(state_dir).map_err(|e| e.to_string())?;
        let start_ms = scenario.run.start_s * 1000;
        let sim = SimHandle::virtual_time(SimCluster::new(&scenario.topology, start_ms));
        let paths = SchedulerPaths::in_dir(state_dir);
        let load = LoadLog::new(&paths.load_dir);
        let scheduler = Scheduler::new(
            paths,
            Arc::new(sim.clone()),
            Arc::new(sim.clone()),
            Some(scenario.run.seed),
        );
        let specs = if scenario.schedule.is_empty() {
            SpecSource::Static(scenario.services.clone())
        } else {
            let entries = scenario
                .schedule
                .iter()
                .map(|s| {
                    Ok(ScheduleEntry {
                        at: s.at.parse()?,
                        path: scenario.base_dir.join(&s.services),
                    })
                })
                .collect::<Result<Vec<_>, String>>()?;
            SpecSource::Swapped(ConfigSwapper::new(ConfigSchedule::new(entries)?, state_dir.join("swap"), 0))
        };
        let mut pending_load = scenario.load.clone();
        pending_load.sort_by(|a, b| a.at_s.total_cmp(&b.at_s));
        let mut pending_faults = scenario.faults.clone();
        pending_faults.sort_by(|a, b| a.at_s.total_cmp(&b.at_s));
        Ok(ScenarioRun {
            sim,
            scheduler,
            specs,
            load,
            levels: BTreeMap::new(),
            pending_load,
            pending_faults,
            now_ms: start_ms,
            start_ms,
            end_ms: start_ms + scenario.run.duration_s * 1000,
            tick_ms: (scenario.run.tick_s * 1000.0).round() as u64,
            ticks: Vec::new(),
            reports: Vec::new(),
            conservation_held: true,
        })
    }

    pub fn sim(&self) -> &SimHandle {
        &self.sim
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    pub fn reports(&self) -> &[TickReport] {
        &self.reports
    }

    pub fn samples(&self) -> &[TickSample] {
        &self.ticks
    }

    pub fn is_finished(&self) -> bool {
        self.now_ms > self.end_ms
    }

    /// Sets a service's concurrency from `at_ms` on by writing the
    /// difference as start/end events.
    pub fn set_load(&mut self, service: &str, level: u32, at_ms: u64) {
        let current = self.levels.entry(service.to_owned()).or_insert(0);
        let event = if level > *current { LoadEvent::start(at_ms) } else { LoadEvent::end(at_ms) };
        for _ in 0..current.abs_diff(level) {
            if let Err(e) = self.load.append(service, event) {
                tracing::warn!(service, error = %e, "load event not recorded");
            }
        }
        *current = level;
    }

    fn specs(&self, now_ms: u64) -> Vec<ServiceSpec> {
        match &self.specs {
            SpecSource::Static(specs) => specs.clone(),
            SpecSource::Swapped(swapper) => swapper.swap_config(now_ms).specs,
        }
    }

    /// Applies due load and faults, advances the simulator and ticks once.
    pub fn step(&mut self) -> &TickReport {
        let now = self.now_ms;
        while self.pending_faults.first().is_some_and(|f| secs_to_ms(f.at_s) + self.start_ms <= now) {
            let f = self.pending_faults.remove(0);
            let at = self.start_ms + secs_to_ms(f.at_s);
            let mut sim = self.sim.lock();
            let at = at.max(sim.now_ms());
            sim.advance_to(at);
            sim.inject_fault(&f.fault);
        }
        while self.pending_load.first().is_some_and(|s| secs_to_ms(s.at_s) + self.start_ms <= now) {
            let s = self.pending_load.remove(0);
            self.set_load(&s.service, s.concurrency, self.start_ms + secs_to_ms(s.at_s));
        }
        self.sim.lock().advance_to(now);
        let specs = self.specs(now);
        let report = match self.scheduler.run_tick(&specs, now) {
            Ok(Some(r)) => r,
            Ok(None) => TickReport {
                now_ms: now,
                errors: vec!["scheduler lock busy".into()],
                ..TickReport::default()
            },
            Err(e) => TickReport {
                now_ms: now,
                errors: vec![e.to_string()],
                ..TickReport::default()
            },
        };
        self.record(&report);
        self.reports.push(report);
        self.now_ms += self.tick_ms.max(1);
        self.reports.last().expect("just pushed")
    }

    fn record(&mut self, report: &TickReport) {
        let table = RoutingTable::load(&self.scheduler.paths().table).unwrap_or_default();
        let sim = self.sim.lock();
        self.conservation_held &= sim.conserves_gpus();
        let mut services: BTreeMap<String, ServiceSample> = report
            .desired
            .iter()
            .map(|(name, d)| {
                (
                    name.clone(),
                    ServiceSample {
                        desired: d.desired,
                        avg_concurrency: d.avg_concurrency,
                        ..ServiceSample::default()
                    },
                )
            })
            .collect();
        for e in &table.entries {
            let s = services.entry(e.service.as_str().to_owned()).or_default();
            match e.state {
                RouteState::Ready => s.ready += 1,
                RouteState::Draining => s.draining += 1,
                _ => {}
            }
        }
        for j in sim.jobs() {
            if matches!(j.state, SimJobState::Pending | SimJobState::Running) {
                services.entry(j.service.clone()).or_default().live_jobs += 1;
            }
        }
        let mut ports: BTreeMap<u16, u32> = BTreeMap::new();
        for e in &table.entries {
            *ports.entry(e.port).or_default() += 1;
        }
        self.ticks.push(TickSample {
            at_ms: report.now_ms,
            services,
            max_port_multiplicity: ports.values().copied().max().unwrap_or(0),
        });
    }

    pub fn run_to_end(&mut self) {
        while !self.is_finished() {
            self.step();
        }
    }

    pub fn report(&self) -> ScenarioReport {
        let sim = self.sim.lock();
        let events = sim.events().to_vec();
        let ready_cancellations = events
            .iter()
            .filter(|e| matches!(e, SimEvent::Cancelled { was_ready: true, .. }))
            .count();
        ScenarioReport {
            ticks: self.ticks.clone(),
            submissions: self.reports.iter().map(|r| r.submitted.len()).sum(),
            startup_cancellations: self.reports.iter().map(|r| r.timed_out.len()).sum(),
            errors: self.reports.iter().flat_map(|r| r.errors.iter().cloned()).collect(),
            events,
            ready_cancellations,
            conservation_held: self.conservation_held,
        }
    }
}

fn secs_to_ms(s: f64) -> u64 {
    (s * 1000.0).round() as u64
}

/// Replays a scenario to completion in a scratch state directory.
pub fn replay(scenario: &Scenario, state_dir: &Path) -> Result<ScenarioReport, String> {
    let mut run = ScenarioRun::new(scenario, state_dir)?;
    run.run_to_end();
    Ok(run.report())
}
