//! Single-holder lock file guarding scheduler ticks.
//!
//! The file holds `<holder> <acquired_at_seconds>`. A lock older than
//! [`STALE_AFTER_SECONDS`] may be broken; contention never queues.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const STALE_AFTER_SECONDS: u64 = 60;

#[derive(Debug, Clone)]
pub struct SchedulerLock {
    path: PathBuf,
}

#[derive(Debug)]
pub enum LockOutcome {
    Held(LockGuard),
    Busy,
}

impl LockOutcome {
    pub fn is_held(&self) -> bool {
        matches!(self, LockOutcome::Held(_))
    }
}

/// Removes the lock file on drop if it still carries our holder token.
#[derive(Debug)]
pub struct LockGuard {
    path: PathBuf,
    contents: String,
}

impl LockGuard {
    pub fn holder(&self) -> &str {
        self.contents.split(' ').next().unwrap_or_default()
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        if std::fs::read_to_string(&self.path).is_ok_and(|c| c == self.contents) {
            let _ = std::fs::remove_file(&self.path);
        }
    }
}

impl SchedulerLock {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        SchedulerLock { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// `now_s` is epoch seconds. Filesystem failures report busy.
    pub fn acquire(&self, now_s: u64) -> LockOutcome {
        let holder = format!("{}:{:08x}", std::process::id(), rand::random::<u32>());
        let contents = format!("{holder} {now_s}\n");
        if self.try_create(&contents) {
            return self.held(contents);
        }
        match self.age(now_s) {
            Some(age) if age >= STALE_AFTER_SECONDS => {
                tracing::warn!(path = %self.path.display(), age, "breaking stale scheduler lock");
                let _ = std::fs::remove_file(&self.path);
                if self.try_create(&contents) {
                    self.held(contents)
                } else {
                    LockOutcome::Busy
                }
            }
            _ => LockOutcome::Busy,
        }
    }

    fn held(&self, contents: String) -> LockOutcome {
        LockOutcome::Held(LockGuard {
            path: self.path.clone(),
            contents,
        })
    }

    fn try_create(&self, contents: &str) -> bool {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            if std::fs::create_dir_all(dir).is_err() {
                return false;
            }
        }
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&self.path);
        match file {
            Ok(mut f) => {
                if f.write_all(contents.as_bytes()).is_err() {
                    let _ = std::fs::remove_file(&self.path);
                    return false;
                }
                true
            }
            Err(_) => false,
        }
    }

    /// Age from the recorded timestamp, falling back to the file's mtime
    /// against the wall clock when the contents are unreadable.
    fn age(&self, now_s: u64) -> Option<u64> {
        let text = std::fs::read_to_string(&self.path).ok();
        let recorded = text
            .as_deref()
            .and_then(|t| t.trim_end().split(' ').nth(1))
            .and_then(|t| t.parse::<u64>().ok());
        if let Some(at) = recorded {
            return Some(now_s.saturating_sub(at));
        }
        let modified = std::fs::metadata(&self.path).ok()?.modified().ok()?;
        let wall = SystemTime::now().duration_since(UNIX_EPOCH).ok()?;
        let mtime = modified.duration_since(UNIX_EPOCH).ok()?;
        Some(wall.saturating_sub(mtime).as_secs())
    }
}
