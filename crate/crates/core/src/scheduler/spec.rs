use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::routing::{PORT_MAX, PORT_MIN};
use crate::wire::ServiceName;

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("service {0:?}: name must match [a-z0-9-]{{1,64}}")]
    BadName(String),
    #[error("service {0}: min_instances exceeds max_instances")]
    MinAboveMax(String),
    #[error("service {0}: renewal_margin_seconds must be below walltime_seconds")]
    RenewalMargin(String),
    #[error("service {0}: window_seconds must be positive")]
    Window(String),
    #[error("service {0}: target_concurrency_per_instance must be positive")]
    Target(String),
    #[error("service {0}: port range must lie within [20000, 40000]")]
    PortRange(String),
    #[error("service {0}: probe_path must start with '/'")]
    ProbePath(String),
    #[error("duplicate service {0}")]
    Duplicate(String),
}

/// Configuration for one maintained service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub name: String,
    /// Handed to the workload manager unchanged.
    pub job_template: String,
    #[serde(default = "defaults::min_instances")]
    pub min_instances: u32,
    #[serde(default = "defaults::max_instances")]
    pub max_instances: u32,
    #[serde(default = "defaults::target_concurrency")]
    pub target_concurrency_per_instance: f64,
    #[serde(default = "defaults::window_seconds")]
    pub window_seconds: u64,
    #[serde(default = "defaults::walltime_seconds")]
    pub walltime_seconds: u64,
    #[serde(default = "defaults::renewal_margin_seconds")]
    pub renewal_margin_seconds: u64,
    #[serde(default = "defaults::probe_path")]
    pub probe_path: String,
    #[serde(default = "defaults::startup_timeout_seconds")]
    pub startup_timeout_seconds: u64,
    #[serde(default = "defaults::port_range")]
    pub port_range: (u16, u16),
}

pub mod defaults {
    pub fn min_instances() -> u32 {
        1
    }
    pub fn max_instances() -> u32 {
        4
    }
    pub fn target_concurrency() -> f64 {
        4.0
    }
    pub fn window_seconds() -> u64 {
        300
    }
    pub fn walltime_seconds() -> u64 {
        4 * 3600
    }
    pub fn renewal_margin_seconds() -> u64 {
        15 * 60
    }
    pub fn probe_path() -> String {
        "/health".into()
    }
    pub fn startup_timeout_seconds() -> u64 {
        20 * 60
    }
    pub fn port_range() -> (u16, u16) {
        (super::PORT_MIN, super::PORT_MAX)
    }
}

impl ServiceSpec {
    /// A spec with every tunable at its default.
    pub fn new(name: &str, job_template: &str) -> ServiceSpec {
        ServiceSpec {
            name: name.into(),
            job_template: job_template.into(),
            min_instances: defaults::min_instances(),
            max_instances: defaults::max_instances(),
            target_concurrency_per_instance: defaults::target_concurrency(),
            window_seconds: defaults::window_seconds(),
            walltime_seconds: defaults::walltime_seconds(),
            renewal_margin_seconds: defaults::renewal_margin_seconds(),
            probe_path: defaults::probe_path(),
            startup_timeout_seconds: defaults::startup_timeout_seconds(),
            port_range: defaults::port_range(),
        }
    }

    pub fn service_name(&self) -> ServiceName {
        ServiceName::new(&self.name).expect("validated service name")
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let name = || self.name.clone();
        if !ServiceName::is_valid(&self.name) {
            return Err(SpecError::BadName(name()));
        }
        if self.min_instances > self.max_instances {
            return Err(SpecError::MinAboveMax(name()));
        }
        if self.renewal_margin_seconds >= self.walltime_seconds {
            return Err(SpecError::RenewalMargin(name()));
        }
        if self.window_seconds == 0 {
            return Err(SpecError::Window(name()));
        }
        let target = self.target_concurrency_per_instance;
        if !target.is_finite() || target <= 0.0 {
            return Err(SpecError::Target(name()));
        }
        let (lo, hi) = self.port_range;
        if lo > hi || lo < PORT_MIN || hi > PORT_MAX {
            return Err(SpecError::PortRange(name()));
        }
        if !self.probe_path.starts_with('/') {
            return Err(SpecError::ProbePath(name()));
        }
        Ok(())
    }
}

pub fn validate_all(specs: &[ServiceSpec]) -> Result<(), SpecError> {
    for (i, spec) in specs.iter().enumerate() {
        spec.validate()?;
        if specs[..i].iter().any(|s| s.name == spec.name) {
            return Err(SpecError::Duplicate(spec.name.clone()));
        }
    }
    Ok(())
}

/// A standalone services file, as swapped in and out by the day/night
/// schedule.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServicesFile {
    #[serde(default)]
    pub services: Vec<ServiceSpec>,
}

impl ServicesFile {
    pub fn parse(text: &str) -> Result<ServicesFile, String> {
        let file: ServicesFile = toml::from_str(text).map_err(|e| e.to_string())?;
        validate_all(&file.services).map_err(|e| e.to_string())?;
        Ok(file)
    }
}
