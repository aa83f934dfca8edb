//! Python bindings. Build with `cargo build -p hpcgate-py --release` and
//! load `libhpcgate_py.so` renamed to `hpcgate_py.so`; see
//! `python/smoke_test.py`.

use std::path::Path;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use hpcgate::config::DeploymentConfig;
use hpcgate::scheduler::ServiceSpec;
use hpcgate::simcluster::{replay, Scenario};
use hpcgate::wire::{parse_command, Command};

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Parses a channel command line. Returns a dict with `kind` set to
/// `"ping"` or `"request"`; raises ValueError on anything else.
#[pyfunction]
fn parse_command_line<'py>(py: Python<'py>, line: &str) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    match parse_command(line).map_err(value_error)? {
        Command::Ping(_) => out.set_item("kind", "ping")?,
        Command::Request(req) => {
            out.set_item("kind", "request")?;
            out.set_item("method", req.method.as_str())?;
            out.set_item("service", req.service.as_str())?;
            out.set_item("path", req.path.as_str())?;
            out.set_item("content_length", req.content_length)?;
            out.set_item("stream", req.stream)?;
        }
    }
    Ok(out)
}

/// Validates a deployment config given as TOML text and returns its hash.
#[pyfunction]
fn validate_config(text: &str) -> PyResult<String> {
    let cfg = DeploymentConfig::parse(text).map_err(value_error)?;
    Ok(cfg.hash())
}

/// Instances wanted for a windowed average concurrency.
#[pyfunction]
#[pyo3(signature = (avg_concurrency, target, min_instances = 1, max_instances = 4))]
fn desired_instances(avg_concurrency: f64, target: f64, min_instances: u32, max_instances: u32) -> PyResult<u32> {
    let spec = ServiceSpec {
        min_instances,
        max_instances,
        target_concurrency_per_instance: target,
        ..ServiceSpec::new("py", "gpus=1")
    };
    spec.validate().map_err(value_error)?;
    Ok(hpcgate::scheduler::desired_instances(avg_concurrency, &spec))
}

/// Replays a scenario (TOML text) in `state_dir` and returns the report as
/// a JSON string. Releases the GIL while the replay runs.
#[pyfunction]
fn replay_scenario(py: Python<'_>, text: &str, state_dir: &str) -> PyResult<String> {
    let scenario = Scenario::parse(text).map_err(value_error)?;
    let dir = Path::new(state_dir).to_path_buf();
    let report = py.detach(move || replay(&scenario, &dir)).map_err(value_error)?;
    serde_json::to_string(&report).map_err(value_error)
}

/// Adds every binding to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(parse_command_line, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(desired_instances, m)?)?;
    m.add_function(wrap_pyfunction!(replay_scenario, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

#[pymodule]
fn hpcgate_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
