use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use crate::wire::ServiceSummary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelStatus {
    Connected,
    Reconnecting,
    Down,
}

impl ChannelStatus {
    fn gauge(self) -> u8 {
        match self {
            ChannelStatus::Connected => 1,
            ChannelStatus::Reconnecting => 2,
            ChannelStatus::Down => 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChannelState {
    pub status: ChannelStatus,
    pub last_pong: Option<Instant>,
    pub consecutive_failures: u32,
    pub service_summary: Vec<ServiceSummary>,
    /// Set once the channel has been up; later recoveries count as
    /// reconnects.
    pub ever_connected: bool,
}

impl Default for ChannelState {
    fn default() -> Self {
        ChannelState {
            status: ChannelStatus::Down,
            last_pong: None,
            consecutive_failures: 0,
            service_summary: Vec::new(),
            ever_connected: false,
        }
    }
}

#[derive(Debug, Default)]
pub struct Metrics {
    pub requests_total: AtomicU64,
    pub requests_failed: AtomicU64,
    pub reconnects_total: AtomicU64,
    pub pings_total: AtomicU64,
    pub pings_failed: AtomicU64,
    pub in_flight: AtomicI64,
    per_service: Mutex<BTreeMap<String, u64>>,
}

impl Metrics {
    pub fn count_service(&self, service: &str) {
        let mut m = self.per_service.lock().unwrap_or_else(|p| p.into_inner());
        *m.entry(service.to_owned()).or_default() += 1;
    }

    pub fn service_count(&self, service: &str) -> u64 {
        let m = self.per_service.lock().unwrap_or_else(|p| p.into_inner());
        m.get(service).copied().unwrap_or(0)
    }

    /// `name{labels} value`, one per line.
    pub fn render(&self, status: ChannelStatus, last_pong_age_s: Option<f64>) -> String {
        let mut out = String::new();
        let counters = [
            ("requests_total", &self.requests_total),
            ("requests_failed", &self.requests_failed),
            ("reconnects_total", &self.reconnects_total),
            ("pings_total", &self.pings_total),
            ("pings_failed", &self.pings_failed),
        ];
        for (name, c) in counters {
            let _ = writeln!(out, "{name} {}", c.load(Ordering::Relaxed));
        }
        for (service, n) in self.per_service.lock().unwrap_or_else(|p| p.into_inner()).iter() {
            let _ = writeln!(out, "service_requests_total{{service=\"{service}\"}} {n}");
        }
        let _ = writeln!(out, "in_flight_requests {}", self.in_flight.load(Ordering::Relaxed));
        let _ = writeln!(out, "channel_status {}", status.gauge());
        if let Some(age) = last_pong_age_s {
            let _ = writeln!(out, "last_pong_age_seconds {age:.3}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_metrics() {
        let m = Metrics::default();
        let text = m.render(ChannelStatus::Down, None);
        assert!(text.lines().any(|l| l == "requests_total 0"));
        assert!(text.lines().any(|l| l == "channel_status 0"));
        for _ in 0..5 {
            m.requests_total.fetch_add(1, Ordering::Relaxed);
        }
        m.count_service("qwen2-72b");
        let text = m.render(ChannelStatus::Connected, Some(1.5));
        assert!(text.lines().any(|l| l == "requests_total 5"));
        assert!(text.lines().any(|l| l == "service_requests_total{service=\"qwen2-72b\"} 1"));
        assert!(text.lines().any(|l| l == "last_pong_age_seconds 1.500"));
    }
}
