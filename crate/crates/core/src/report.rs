//! Run reports: one JSON document plus an aligned text table, both
//! stamped with the config hash.

use std::path::{Path, PathBuf};

use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct Report<T: Serialize> {
    pub command: String,
    pub config_hash: String,
    pub finished_at_ms: u64,
    pub passed: bool,
    pub result: T,
}

impl<T: Serialize> Report<T> {
    pub fn new(command: &str, config_hash: &str, passed: bool, result: T) -> Self {
        Report {
            command: command.to_owned(),
            config_hash: config_hash.to_owned(),
            finished_at_ms: crate::clock::now_ms(),
            passed,
            result,
        }
    }

    /// Writes `<name>.json` and `<name>.txt` into `dir`; returns both paths.
    pub fn write(&self, dir: &Path, name: &str, table: &str) -> std::io::Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let json = dir.join(format!("{name}.json"));
        let txt = dir.join(format!("{name}.txt"));
        let mut doc = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        doc.push('\n');
        std::fs::write(&json, doc)?;
        let text = format!(
            "{}  config {}  {}\n{table}",
            self.command,
            self.config_hash,
            if self.passed { "PASS" } else { "FAIL" }
        );
        std::fs::write(&txt, text)?;
        Ok((json, txt))
    }
}
