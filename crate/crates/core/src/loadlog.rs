//! Per-service request start/stop log used for load averaging.
//!
//! Each service has `load/<service>.log` with lines `epoch_millis +1|-1`.
//! The interface appends one line per request start and one per request
//! end; the scheduler integrates the resulting step function and then
//! truncates the file to the averaging window.

use std::fs::OpenOptions;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::routing::write_atomic;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("load log line {0} is malformed")]
    Malformed(usize),
    #[error("load log running sum went negative")]
    CorruptLog,
    #[error("load log io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadEvent {
    pub at_ms: u64,
    pub delta: i8,
}

impl LoadEvent {
    pub fn start(at_ms: u64) -> Self {
        LoadEvent { at_ms, delta: 1 }
    }

    pub fn end(at_ms: u64) -> Self {
        LoadEvent { at_ms, delta: -1 }
    }

    fn render(self) -> String {
        format!("{} {}\n", self.at_ms, if self.delta > 0 { "+1" } else { "-1" })
    }
}

/// Time-weighted concurrency over a window: `integral` is the sum of
/// concurrency × milliseconds over the window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WindowLoad {
    pub integral: u64,
    pub window_ms: u64,
}

impl WindowLoad {
    pub fn mean(self) -> f64 {
        if self.window_ms == 0 {
            0.0
        } else {
            self.integral as f64 / self.window_ms as f64
        }
    }
}

pub fn parse_events(text: &str) -> Result<Vec<LoadEvent>, LogError> {
    let mut events = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (at, delta) = line.split_once(' ').ok_or(LogError::Malformed(idx + 1))?;
        let at_ms = at.parse().map_err(|_| LogError::Malformed(idx + 1))?;
        let delta = match delta {
            "+1" => 1,
            "-1" => -1,
            _ => return Err(LogError::Malformed(idx + 1)),
        };
        events.push(LoadEvent { at_ms, delta });
    }
    // concurrent writers may land slightly out of order
    events.sort_by_key(|e| e.at_ms);
    Ok(events)
}

/// Integrates the concurrency step function over `[now - window, now]`.
/// Events before the window contribute through the carried-in running sum;
/// events after `now` are ignored.
pub fn window_load(events: &[LoadEvent], window_ms: u64, now_ms: u64) -> Result<WindowLoad, LogError> {
    let start = now_ms as i128 - window_ms as i128;
    let mut level: i64 = 0;
    let mut cursor = start;
    let mut integral: u128 = 0;
    for ev in events {
        let at = ev.at_ms as i128;
        if at > now_ms as i128 {
            break;
        }
        if at > cursor {
            integral += level as u128 * (at - cursor) as u128;
            cursor = at;
        }
        level += ev.delta as i64;
        if level < 0 {
            return Err(LogError::CorruptLog);
        }
    }
    integral += level as u128 * (now_ms as i128 - cursor).max(0) as u128;
    Ok(WindowLoad {
        integral: integral as u64,
        window_ms,
    })
}

/// Concurrency level in effect just after `at_ms`.
fn level_at(events: &[LoadEvent], at_ms: i128) -> i64 {
    events
        .iter()
        .take_while(|e| (e.at_ms as i128) <= at_ms)
        .map(|e| e.delta as i64)
        .sum()
}

#[derive(Debug, Clone)]
pub struct LoadLog {
    dir: PathBuf,
}

impl LoadLog {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        LoadLog { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, service: &str) -> PathBuf {
        self.dir.join(format!("{service}.log"))
    }

    /// One short line per call, written with a single append.
    pub fn append(&self, service: &str, event: LoadEvent) -> std::io::Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.path(service))?;
        f.write_all(event.render().as_bytes())
    }

    pub fn read(&self, service: &str) -> Result<Vec<LoadEvent>, LogError> {
        match std::fs::read_to_string(self.path(service)) {
            Ok(text) => parse_events(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e.into()),
        }
    }

    /// Computes the windowed average and truncates the log to the window.
    /// A corrupt or unreadable log counts as zero load and is reset.
    pub fn average(&self, service: &str, window_ms: u64, now_ms: u64) -> WindowLoad {
        let path = self.path(service);
        let (text, read_len) = match read_with_len(&path) {
            Ok(v) => v,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return WindowLoad { integral: 0, window_ms },
            Err(e) => {
                tracing::warn!(service, error = %e, "load log unreadable");
                return WindowLoad { integral: 0, window_ms };
            }
        };
        let computed = parse_events(&text).and_then(|events| {
            let load = window_load(&events, window_ms, now_ms)?;
            Ok((events, load))
        });
        match computed {
            Ok((events, load)) => {
                if let Err(e) = self.truncate(&path, &events, window_ms, now_ms, read_len) {
                    tracing::warn!(service, error = %e, "load log truncation failed");
                }
                load
            }
            Err(e) => {
                tracing::warn!(service, error = %e, "resetting load log");
                let _ = write_atomic(&path, b"");
                WindowLoad { integral: 0, window_ms }
            }
        }
    }

    fn truncate(
        &self,
        path: &Path,
        events: &[LoadEvent],
        window_ms: u64,
        now_ms: u64,
        read_len: u64,
    ) -> std::io::Result<()> {
        let start = now_ms as i128 - window_ms as i128;
        if start <= 0 || events.first().is_none_or(|e| e.at_ms as i128 > start) {
            return Ok(());
        }
        let carried = level_at(events, start);
        let mut out = String::new();
        for _ in 0..carried {
            out.push_str(&LoadEvent::start(start as u64).render());
        }
        for ev in events.iter().filter(|e| e.at_ms as i128 > start) {
            out.push_str(&ev.render());
        }
        // pick up lines appended since we read
        let mut f = std::fs::File::open(path)?;
        f.seek(SeekFrom::Start(read_len))?;
        let mut tail = String::new();
        f.read_to_string(&mut tail)?;
        out.push_str(&tail);
        write_atomic(path, out.as_bytes())
    }
}

fn read_with_len(path: &Path) -> std::io::Result<(String, u64)> {
    let mut f = std::fs::File::open(path)?;
    let mut text = String::new();
    f.read_to_string(&mut text)?;
    let len = text.len() as u64;
    Ok((text, len))
}
