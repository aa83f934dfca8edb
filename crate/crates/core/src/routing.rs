//! The routing table shared between the scheduler (writer) and the
//! interface (reader).
//!
//! On disk: one entry per line, `job_id service node port state epoch_seconds`,
//! space separated and LF terminated. Writers replace the file atomically.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::wire::ServiceName;

pub const PORT_MIN: u16 = 20000;
pub const PORT_MAX: u16 = 40000;
/// Placeholder node for entries not yet placed by the workload manager.
pub const UNPLACED: &str = "-";

#[derive(Debug, Error)]
pub enum TableError {
    #[error("routing table line {line}: {reason}")]
    Parse { line: usize, reason: &'static str },
    #[error("routing table io: {0}")]
    Io(#[from] std::io::Error),
    #[error("no ready instance for service {0}")]
    NoReadyInstance(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RouteState {
    Submitted,
    Starting,
    Ready,
    Draining,
}

impl RouteState {
    pub fn as_str(self) -> &'static str {
        match self {
            RouteState::Submitted => "SUBMITTED",
            RouteState::Starting => "STARTING",
            RouteState::Ready => "READY",
            RouteState::Draining => "DRAINING",
        }
    }

    /// Whether requests may be sent to an instance in this state. Draining
    /// instances keep serving until the workload manager ends the job.
    pub fn is_routable(self) -> bool {
        matches!(self, RouteState::Ready | RouteState::Draining)
    }
}

impl fmt::Display for RouteState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RouteState {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Ok(match s {
            "SUBMITTED" => RouteState::Submitted,
            "STARTING" => RouteState::Starting,
            "READY" => RouteState::Ready,
            "DRAINING" => RouteState::Draining,
            _ => return Err(()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteEntry {
    pub job_id: String,
    pub service: ServiceName,
    pub node: String,
    pub port: u16,
    pub state: RouteState,
    pub updated_at: u64,
}

impl RouteEntry {
    pub fn is_placed(&self) -> bool {
        self.node != UNPLACED
    }
}

fn valid_token(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 255
        && s
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
}

pub fn valid_node_name(s: &str) -> bool {
    s == UNPLACED || valid_token(s)
}

pub fn valid_job_id(s: &str) -> bool {
    valid_token(s)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoutingTable {
    pub entries: Vec<RouteEntry>,
}

impl RoutingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<RoutingTable, TableError> {
        let mut entries: Vec<RouteEntry> = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let err = |reason| TableError::Parse {
                line: line_no,
                reason,
            };
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(' ').collect();
            let [job_id, service, node, port, state, updated_at] = fields[..] else {
                return Err(err("expected 6 fields"));
            };
            if !valid_job_id(job_id) {
                return Err(err("bad job id"));
            }
            let service = ServiceName::new(service).ok_or(err("bad service"))?;
            if !valid_node_name(node) {
                return Err(err("bad node"));
            }
            let port: u16 = port.parse().map_err(|_| err("bad port"))?;
            if !(PORT_MIN..=PORT_MAX).contains(&port) {
                return Err(err("port out of range"));
            }
            let state = state.parse().map_err(|_| err("bad state"))?;
            let updated_at = updated_at.parse().map_err(|_| err("bad timestamp"))?;
            if entries.iter().any(|e| e.job_id == job_id) {
                return Err(err("duplicate job id"));
            }
            if entries.iter().any(|e| e.port == port) {
                return Err(err("duplicate port"));
            }
            entries.push(RouteEntry {
                job_id: job_id.to_owned(),
                service,
                node: node.to_owned(),
                port,
                state,
                updated_at,
            });
        }
        Ok(RoutingTable { entries })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{} {} {} {} {} {}\n",
                e.job_id, e.service, e.node, e.port, e.state, e.updated_at
            ));
        }
        out
    }

    /// Loads the table; a missing file is an empty table.
    pub fn load(path: &Path) -> Result<RoutingTable, TableError> {
        match std::fs::read_to_string(path) {
            Ok(text) => Self::parse(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(RoutingTable::new()),
            Err(e) => Err(e.into()),
        }
    }

    /// Writes to a temporary sibling and renames over `path`, so readers see
    /// either the old or the new table.
    pub fn store(&self, path: &Path) -> Result<(), TableError> {
        write_atomic(path, self.render().as_bytes())?;
        Ok(())
    }

    pub fn get(&self, job_id: &str) -> Option<&RouteEntry> {
        self.entries.iter().find(|e| e.job_id == job_id)
    }

    pub fn port_in_use(&self, port: u16) -> bool {
        self.entries.iter().any(|e| e.port == port)
    }

    pub fn for_service<'a, 's>(
        &'a self,
        service: &'s str,
    ) -> impl Iterator<Item = &'a RouteEntry> + use<'a, 's> {
        self.entries
            .iter()
            .filter(move |e| e.service.as_str() == service)
    }

    pub fn routable(&self, service: &str) -> Vec<&RouteEntry> {
        self.for_service(service)
            .filter(|e| e.state.is_routable() && e.is_placed())
            .collect()
    }

    pub fn count(&self, service: &str, state: RouteState) -> usize {
        self.for_service(service).filter(|e| e.state == state).count()
    }
}

/// Uniform choice among the routable instances of `service`.
pub fn pick_instance<'a, R: Rng + ?Sized>(
    table: &'a RoutingTable,
    service: &str,
    rng: &mut R,
) -> Result<&'a RouteEntry, TableError> {
    let eligible = table.routable(service);
    if eligible.is_empty() {
        return Err(TableError::NoReadyInstance(service.to_owned()));
    }
    Ok(eligible[rng.random_range(0..eligible.len())])
}

pub(crate) fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "table".into());
    let tmp_name = format!(
        ".{file_name}.{}.{}.tmp",
        std::process::id(),
        rand::random::<u32>()
    );
    let tmp = match dir {
        Some(d) => d.join(tmp_name),
        None => tmp_name.into(),
    };
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result
}
