//! Time-of-day config swapping, e.g. serve by day and hand the GPUs back to
//! batch work by night.
//!
//! The active config path is recorded in `<state_dir>/config.active` as
//! `active <path>` / `previous <path>` lines, and the outgoing config's
//! contents are copied to `<state_dir>/config.backup` on every switch.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::routing::write_atomic;

use super::{ServiceSpec, ServicesFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeOfDay(u16);

impl TimeOfDay {
    pub fn from_minutes(minutes: u16) -> Option<TimeOfDay> {
        (minutes < 24 * 60).then_some(TimeOfDay(minutes))
    }

    pub fn minutes(self) -> u16 {
        self.0
    }

    /// Time of day for an epoch-millisecond instant at a fixed UTC offset.
    pub fn at(now_ms: u64, utc_offset_minutes: i32) -> TimeOfDay {
        let minutes = (now_ms / 60_000) as i64 + utc_offset_minutes as i64;
        TimeOfDay(minutes.rem_euclid(24 * 60) as u16)
    }
}

impl FromStr for TimeOfDay {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || format!("bad time of day {s:?}, expected HH:MM");
        let (h, m) = s.split_once(':').ok_or_else(err)?;
        if h.len() != 2 || m.len() != 2 {
            return Err(err());
        }
        let h: u16 = h.parse().map_err(|_| err())?;
        let m: u16 = m.parse().map_err(|_| err())?;
        if h > 23 || m > 59 {
            return Err(err());
        }
        Ok(TimeOfDay(h * 60 + m))
    }
}

impl fmt::Display for TimeOfDay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02}:{:02}", self.0 / 60, self.0 % 60)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleEntry {
    pub at: TimeOfDay,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigSchedule {
    entries: Vec<ScheduleEntry>,
}

impl ConfigSchedule {
    pub fn new(mut entries: Vec<ScheduleEntry>) -> Result<ConfigSchedule, String> {
        if entries.is_empty() {
            return Err("config schedule is empty".into());
        }
        entries.sort_by_key(|e| e.at);
        if entries.windows(2).any(|w| w[0].at == w[1].at) {
            return Err("config schedule has two entries at the same time".into());
        }
        Ok(ConfigSchedule { entries })
    }

    pub fn entries(&self) -> &[ScheduleEntry] {
        &self.entries
    }

    /// The entry whose window contains `now`: the latest start at or before
    /// `now`, wrapping to the last entry of the previous day.
    pub fn select(&self, now: TimeOfDay) -> &ScheduleEntry {
        self.entries
            .iter()
            .rev()
            .find(|e| e.at <= now)
            .unwrap_or_else(|| self.entries.last().expect("non-empty schedule"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwapOutcome {
    pub active: Option<PathBuf>,
    pub specs: Vec<ServiceSpec>,
    pub switched: bool,
}

#[derive(Debug, Clone)]
pub struct ConfigSwapper {
    schedule: ConfigSchedule,
    state_dir: PathBuf,
    utc_offset_minutes: i32,
}

impl ConfigSwapper {
    pub fn new(schedule: ConfigSchedule, state_dir: impl Into<PathBuf>, utc_offset_minutes: i32) -> Self {
        ConfigSwapper {
            schedule,
            state_dir: state_dir.into(),
            utc_offset_minutes,
        }
    }

    fn state_path(&self) -> PathBuf {
        self.state_dir.join("config.active")
    }

    pub fn backup_path(&self) -> PathBuf {
        self.state_dir.join("config.backup")
    }

    /// Recorded `(active, previous)` config paths.
    pub fn recorded(&self) -> (Option<PathBuf>, Option<PathBuf>) {
        let text = std::fs::read_to_string(self.state_path()).unwrap_or_default();
        let mut active = None;
        let mut previous = None;
        for line in text.lines() {
            if let Some(p) = line.strip_prefix("active ") {
                active = Some(PathBuf::from(p));
            } else if let Some(p) = line.strip_prefix("previous ") {
                previous = Some(PathBuf::from(p));
            }
        }
        (active, previous)
    }

    /// Picks the config for `now_ms` and records any switch. An unreadable
    /// target keeps the previously active config.
    pub fn swap_config(&self, now_ms: u64) -> SwapOutcome {
        let target = &self.schedule.select(TimeOfDay::at(now_ms, self.utc_offset_minutes)).path;
        let (active, _) = self.recorded();
        if active.as_deref() == Some(target.as_path()) {
            if let Ok(specs) = load_services(target) {
                return SwapOutcome {
                    active,
                    specs,
                    switched: false,
                };
            }
        }
        match load_services(target) {
            Ok(specs) => {
                if active.as_deref() != Some(target.as_path()) {
                    self.record_switch(active.as_deref(), target);
                }
                SwapOutcome {
                    active: Some(target.clone()),
                    specs,
                    switched: active.as_deref() != Some(target.as_path()),
                }
            }
            Err(e) => {
                tracing::warn!(config = %target.display(), error = %e, "config unreadable, keeping active config");
                let specs = active
                    .as_deref()
                    .and_then(|p| load_services(p).ok())
                    .unwrap_or_default();
                SwapOutcome {
                    active,
                    specs,
                    switched: false,
                }
            }
        }
    }

    fn record_switch(&self, previous: Option<&Path>, target: &Path) {
        let _ = std::fs::create_dir_all(&self.state_dir);
        if let Some(prev) = previous {
            if let Ok(contents) = std::fs::read(prev) {
                let _ = write_atomic(&self.backup_path(), &contents);
            }
        }
        let mut state = format!("active {}\n", target.display());
        if let Some(prev) = previous {
            state.push_str(&format!("previous {}\n", prev.display()));
        }
        if let Err(e) = write_atomic(&self.state_path(), state.as_bytes()) {
            tracing::warn!(error = %e, "could not record active config");
        }
        tracing::info!(config = %target.display(), "switched scheduler config");
    }
}

fn load_services(path: &Path) -> Result<Vec<ServiceSpec>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    ServicesFile::parse(&text).map(|f| f.services)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hm(s: &str) -> TimeOfDay {
        s.parse().unwrap()
    }

    fn day_night(dir: &Path) -> ConfigSchedule {
        ConfigSchedule::new(vec![
            ScheduleEntry { at: hm("20:00"), path: dir.join("night-empty.conf") },
            ScheduleEntry { at: hm("08:00"), path: dir.join("day.conf") },
        ])
        .unwrap()
    }

    #[test]
    fn parses_time_of_day() {
        assert_eq!(hm("08:00").minutes(), 480);
        assert_eq!(hm("23:59").to_string(), "23:59");
        for bad in ["8:00", "24:00", "12:60", "1200", "aa:bb"] {
            assert!(bad.parse::<TimeOfDay>().is_err(), "{bad}");
        }
        assert_eq!(TimeOfDay::at(0, 0).minutes(), 0);
        assert_eq!(TimeOfDay::at(0, -60).to_string(), "23:00");
        assert_eq!(TimeOfDay::at(86_400_000 + 12 * 3_600_000, 0).to_string(), "12:00");
    }

    #[test]
    fn window_membership() {
        let dir = Path::new("/cfg");
        let sched = day_night(dir);
        assert_eq!(sched.select(hm("12:00")).path, dir.join("day.conf"));
        assert_eq!(sched.select(hm("23:00")).path, dir.join("night-empty.conf"));
        assert_eq!(sched.select(hm("03:00")).path, dir.join("night-empty.conf"));
        assert_eq!(sched.select(hm("08:00")).path, dir.join("day.conf"));
        assert_eq!(sched.select(hm("19:59")).path, dir.join("day.conf"));
    }

    #[test]
    fn switch_records_backup_and_survives_unreadable() {
        let dir = tempfile::tempdir().unwrap();
        let day = "[[services]]\nname = \"m\"\njob_template = \"gpus=1\"\n";
        std::fs::write(dir.path().join("day.conf"), day).unwrap();
        std::fs::write(dir.path().join("night-empty.conf"), "").unwrap();
        let swapper = ConfigSwapper::new(day_night(dir.path()), dir.path().join("state"), 0);

        let noon = 12 * 3_600_000;
        let out = swapper.swap_config(noon);
        assert!(out.switched);
        assert_eq!(out.specs.len(), 1);
        assert!(!swapper.swap_config(noon + 60_000).switched);

        let late = 23 * 3_600_000;
        let out = swapper.swap_config(late);
        assert!(out.switched);
        assert!(out.specs.is_empty());
        assert_eq!(std::fs::read_to_string(swapper.backup_path()).unwrap(), day);
        let (active, previous) = swapper.recorded();
        assert_eq!(active.unwrap(), dir.path().join("night-empty.conf"));
        assert_eq!(previous.unwrap(), dir.path().join("day.conf"));

        // morning: day config unreadable, keep night
        std::fs::remove_file(dir.path().join("day.conf")).unwrap();
        let out = swapper.swap_config(86_400_000 + 9 * 3_600_000);
        assert!(!out.switched);
        assert_eq!(out.active.unwrap(), dir.path().join("night-empty.conf"));
    }

    #[test]
    fn schedule_validation() {
        assert!(ConfigSchedule::new(vec![]).is_err());
        let dup = vec![
            ScheduleEntry { at: hm("08:00"), path: "a".into() },
            ScheduleEntry { at: hm("08:00"), path: "b".into() },
        ];
        assert!(ConfigSchedule::new(dup).is_err());
    }
}
