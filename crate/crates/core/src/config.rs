//! The deployment file: one TOML document with `[proxy]`, `[scheduler]`
//! and `[sim]` sections. Every key is listed in the README.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::proxy::ProxySettings;
use crate::resolve::NodeResolver;
use crate::scheduler::{validate_all, SlurmCli, ConfigSchedule, ConfigSwapper, ScheduleEntry, SchedulerPaths, ServiceSpec};
use crate::simcluster::{MockProfile, ScheduleSpec, Topology};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Invalid(String),
}

/// Which workload manager the scheduler drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Slurm,
    /// The in-process simulator; only `run sim` and `run all --local`
    /// can tick against it.
    Sim,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlurmSettings {
    #[serde(default = "SlurmSettings::sbatch")]
    pub sbatch: String,
    #[serde(default = "SlurmSettings::squeue")]
    pub squeue: String,
    #[serde(default = "SlurmSettings::scancel")]
    pub scancel: String,
    #[serde(default)]
    pub submit_args: Vec<String>,
}

impl SlurmSettings {
    fn sbatch() -> String {
        "sbatch".into()
    }
    fn squeue() -> String {
        "squeue".into()
    }
    fn scancel() -> String {
        "scancel".into()
    }

    pub fn cli(&self) -> SlurmCli {
        SlurmCli {
            sbatch: self.sbatch.clone(),
            squeue: self.squeue.clone(),
            scancel: self.scancel.clone(),
            submit_args: self.submit_args.clone(),
        }
    }
}

impl Default for SlurmSettings {
    fn default() -> Self {
        toml::from_str("").expect("all slurm settings have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSettings {
    #[serde(default)]
    pub backend: Backend,
    #[serde(default)]
    pub slurm: SlurmSettings,
    /// Node name to host mapping used for probes and forwarding.
    #[serde(default)]
    pub resolver: NodeResolver,
    /// Command the interface spawns on a ping to run one tick; defaults to
    /// this binary's `run scheduler --once`. Unused with the sim backend.
    #[serde(default)]
    pub trigger_command: Option<Vec<String>>,
    /// Directory for any of the files below left unset.
    #[serde(default = "SchedulerSettings::default_state_dir")]
    pub state_dir: PathBuf,
    pub table_path: Option<PathBuf>,
    pub desired_path: Option<PathBuf>,
    pub load_dir: Option<PathBuf>,
    pub lock_path: Option<PathBuf>,
    #[serde(default = "SchedulerSettings::default_tick")]
    pub tick_interval_s: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub services: Vec<ServiceSpec>,
    /// Day/night config swap; when set it replaces `services`.
    #[serde(default)]
    pub schedule: Vec<ScheduleSpec>,
    #[serde(default)]
    pub utc_offset_minutes: i32,
}

impl SchedulerSettings {
    fn default_state_dir() -> PathBuf {
        PathBuf::from("state")
    }
    fn default_tick() -> f64 {
        5.0
    }

    /// The simulator binds on loopback, so an unset resolver means
    /// 127.0.0.1 there and node names as host names on a real cluster.
    pub fn effective_resolver(&self) -> NodeResolver {
        if self.backend == Backend::Sim && self.resolver == NodeResolver::default() {
            NodeResolver::loopback()
        } else {
            self.resolver.clone()
        }
    }

    pub fn paths(&self) -> SchedulerPaths {
        let base = SchedulerPaths::in_dir(&self.state_dir);
        SchedulerPaths {
            table: self.table_path.clone().unwrap_or(base.table),
            desired: self.desired_path.clone().unwrap_or(base.desired),
            load_dir: self.load_dir.clone().unwrap_or(base.load_dir),
            lock: self.lock_path.clone().unwrap_or(base.lock),
        }
    }

    pub fn tick_interval(&self) -> Duration {
        Duration::from_secs_f64(self.tick_interval_s)
    }

    pub fn swapper(&self) -> Result<Option<ConfigSwapper>, ConfigError> {
        if self.schedule.is_empty() {
            return Ok(None);
        }
        let mut entries = Vec::new();
        for s in &self.schedule {
            let at = s
                .at
                .parse()
                .map_err(|e| ConfigError::Invalid(format!("scheduler.schedule at {:?}: {e}", s.at)))?;
            entries.push(ScheduleEntry {
                at,
                path: s.services.clone(),
            });
        }
        let schedule = ConfigSchedule::new(entries).map_err(ConfigError::Invalid)?;
        Ok(Some(ConfigSwapper::new(schedule, &self.state_dir, self.utc_offset_minutes)))
    }
}

impl Default for SchedulerSettings {
    fn default() -> Self {
        toml::from_str("").expect("all scheduler settings have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSettings {
    #[serde(default)]
    pub topology: Topology,
    /// Mock behaviour by job-template profile name.
    #[serde(default)]
    pub profiles: BTreeMap<String, MockProfile>,
    #[serde(default = "SimSettings::default_sync")]
    pub host_sync_ms: u64,
}

impl SimSettings {
    fn default_sync() -> u64 {
        20
    }
}

impl Default for SimSettings {
    fn default() -> Self {
        toml::from_str("").expect("all sim settings have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DeploymentConfig {
    #[serde(default)]
    pub proxy: ProxySettings,
    #[serde(default)]
    pub scheduler: SchedulerSettings,
    #[serde(default)]
    pub sim: SimSettings,
}

impl DeploymentConfig {
    /// Parses and validates. Relative paths stay relative to the working
    /// directory; use [`DeploymentConfig::load`] to anchor them at the file.
    pub fn parse(text: &str) -> Result<DeploymentConfig, ConfigError> {
        let cfg: DeploymentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<DeploymentConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        let mut cfg: DeploymentConfig =
            toml::from_str(&text).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            cfg.anchor(base);
        }
        cfg.validate()
            .map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    fn anchor(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let s = &mut self.scheduler;
        fix(&mut s.state_dir);
        for p in [&mut s.table_path, &mut s.desired_path, &mut s.load_dir, &mut s.lock_path]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        for e in &mut s.schedule {
            fix(&mut e.services);
        }
        if let Some(p) = &mut self.proxy.access_log {
            fix(p);
        }
    }

    /// Service specs known to the scheduler: the inline list plus every
    /// file named by the swap schedule.
    pub fn all_services(&self) -> Result<Vec<ServiceSpec>, ConfigError> {
        let mut out = self.scheduler.services.clone();
        for entry in &self.scheduler.schedule {
            let text = std::fs::read_to_string(&entry.services).map_err(|source| ConfigError::Read {
                path: entry.services.clone(),
                source,
            })?;
            let file = crate::scheduler::ServicesFile::parse(&text)
                .map_err(|e| ConfigError::Invalid(format!("{}: {e}", entry.services.display())))?;
            for spec in file.services {
                if !out.iter().any(|s| s.name == spec.name) {
                    out.push(spec);
                }
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        validate_all(&self.scheduler.services).map_err(|e| ConfigError::Invalid(format!("scheduler.services: {e}")))?;
        let s = &self.scheduler;
        if s.trigger_command.as_ref().is_some_and(|c| c.is_empty()) {
            return Err(ConfigError::Invalid("scheduler.trigger_command must not be empty".into()));
        }
        if !(s.tick_interval_s.is_finite() && s.tick_interval_s > 0.0) {
            return Err(ConfigError::Invalid("scheduler.tick_interval_s must be positive".into()));
        }
        self.scheduler.swapper()?;
        let services: BTreeSet<String> = self.all_services()?.into_iter().map(|s| s.name).collect();
        let mut models = BTreeSet::new();
        for (i, route) in self.proxy.routes.iter().enumerate() {
            if !services.contains(&route.service) {
                return Err(ConfigError::Invalid(format!(
                    "proxy.routes[{i}]: model {:?} routes to unknown service {:?}",
                    route.model, route.service
                )));
            }
            if !models.insert(route.model.as_str()) {
                return Err(ConfigError::Invalid(format!(
                    "proxy.routes[{i}]: model {:?} is bound twice",
                    route.model
                )));
            }
        }
        let mut ids = BTreeSet::new();
        for (i, key) in self.proxy.api_keys.iter().enumerate() {
            if key.key.is_empty() || !ids.insert(key.id.as_str()) {
                return Err(ConfigError::Invalid(format!(
                    "proxy.api_keys[{i}]: empty key or duplicate id {:?}",
                    key.id
                )));
            }
        }
        let p = &self.proxy;
        if p.ping_timeout_ms >= p.ping_interval_ms || p.backoff_initial_ms == 0 || p.backoff_max_ms < p.backoff_initial_ms {
            return Err(ConfigError::Invalid(
                "proxy: need ping_timeout_ms < ping_interval_ms and 0 < backoff_initial_ms <= backoff_max_ms".into(),
            ));
        }
        for (name, profile) in &self.sim.profiles {
            profile
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("sim.profiles.{name}: {e}")))?;
        }

        let paths = s.paths();
        let mut files = vec![
            ("scheduler table_path", paths.table),
            ("scheduler desired_path", paths.desired),
            ("scheduler load_dir", paths.load_dir),
            ("scheduler lock_path", paths.lock),
        ];
        if let Some(log) = &p.access_log {
            files.push(("proxy access_log", log.clone()));
        }
        for e in &s.schedule {
            files.push(("scheduler schedule services", e.services.clone()));
        }
        for (i, (a_name, a)) in files.iter().enumerate() {
            for (b_name, b) in &files[i + 1..] {
                if a == b {
                    return Err(ConfigError::Invalid(format!(
                        "{a_name} and {b_name} are the same path {}",
                        a.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// sha256 of the canonical serialisation, first 16 hex digits.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serialises");
        let digest = Sha256::digest(&canonical);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
