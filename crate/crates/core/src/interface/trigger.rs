use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::mpsc::{sync_channel, SyncSender, TrySendError};
use std::sync::Mutex;
use std::time::{Duration, Instant};

/// Fire-and-forget request for a scheduler tick. Must not block.
pub trait SchedulerTrigger: Send + Sync {
    fn trigger(&self);
}

/// Does nothing; for interfaces whose scheduler runs on a timer.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoTrigger;

impl SchedulerTrigger for NoTrigger {
    fn trigger(&self) {}
}

/// Runs ticks on one background thread. Triggers arriving while a tick
/// is queued collapse into it, and ticks start at least `min_interval`
/// apart so a burst of pings cannot keep the scheduler busy.
pub struct WorkerTrigger {
    tx: Mutex<SyncSender<()>>,
}

pub const DEFAULT_MIN_TICK_INTERVAL: Duration = Duration::from_secs(1);

impl WorkerTrigger {
    pub fn new<F: FnMut() + Send + 'static>(tick: F) -> Self {
        Self::with_min_interval(DEFAULT_MIN_TICK_INTERVAL, tick)
    }

    pub fn with_min_interval<F: FnMut() + Send + 'static>(min_interval: Duration, mut tick: F) -> Self {
        let (tx, rx) = sync_channel::<()>(1);
        std::thread::Builder::new()
            .name("scheduler-trigger".into())
            .spawn(move || {
                let mut last: Option<Instant> = None;
                while rx.recv().is_ok() {
                    if let Some(wait) = last.and_then(|l| min_interval.checked_sub(l.elapsed())) {
                        std::thread::sleep(wait);
                    }
                    last = Some(Instant::now());
                    tick();
                }
            })
            .expect("spawn scheduler trigger thread");
        WorkerTrigger { tx: Mutex::new(tx) }
    }
}

impl SchedulerTrigger for WorkerTrigger {
    fn trigger(&self) {
        let tx = self.tx.lock().unwrap_or_else(|p| p.into_inner());
        match tx.try_send(()) {
            Ok(()) | Err(TrySendError::Full(())) => {}
            Err(TrySendError::Disconnected(())) => tracing::warn!("scheduler trigger thread is gone"),
        }
    }
}

/// Spawns a detached one-shot scheduler process, e.g.
/// `hpcgate run scheduler --once --config <file>`. The scheduler lock
/// serializes overlapping ticks.
#[derive(Debug, Clone)]
pub struct SpawnTrigger {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl SchedulerTrigger for SpawnTrigger {
    fn trigger(&self) {
        let spawned = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn();
        match spawned {
            // reaped by a thread so a long-lived caller leaves no zombies
            Ok(mut child) => {
                std::thread::spawn(move || child.wait());
            }
            Err(e) => tracing::warn!(error = %e, "could not spawn scheduler tick"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn worker_coalesces() {
        let runs = Arc::new(AtomicUsize::new(0));
        let (gate_tx, gate_rx) = std::sync::mpsc::channel::<()>();
        let gate_rx = Mutex::new(gate_rx);
        let counter = runs.clone();
        let trigger = WorkerTrigger::with_min_interval(Duration::ZERO, move || {
            let _ = gate_rx.lock().unwrap().recv_timeout(Duration::from_secs(5));
            counter.fetch_add(1, Ordering::SeqCst);
        });
        // first trigger starts a tick that blocks on the gate; the rest
        // collapse into a single queued tick
        trigger.trigger();
        std::thread::sleep(Duration::from_millis(50));
        for _ in 0..49 {
            trigger.trigger();
        }
        gate_tx.send(()).unwrap();
        gate_tx.send(()).unwrap();
        std::thread::sleep(Duration::from_millis(100));
        assert_eq!(runs.load(Ordering::SeqCst), 2);
    }
}
