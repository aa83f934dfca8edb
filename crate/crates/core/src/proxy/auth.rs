use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;

pub const DEFAULT_RATE_LIMIT_PER_MINUTE: u32 = 60;
const RATE_WINDOW: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiKey {
    /// Recorded in the access log instead of the key.
    pub id: String,
    pub key: String,
    #[serde(default)]
    pub rate_limit_per_minute: Option<u32>,
}

/// Key lookup by digest, compared in constant time against every key.
#[derive(Debug)]
pub struct KeyRing {
    keys: Vec<([u8; 32], String, u32)>,
}

fn digest(s: &str) -> [u8; 32] {
    Sha256::digest(s.as_bytes()).into()
}

impl KeyRing {
    pub fn new(keys: &[ApiKey], default_limit: u32) -> KeyRing {
        KeyRing {
            keys: keys
                .iter()
                .map(|k| (digest(&k.key), k.id.clone(), k.rate_limit_per_minute.unwrap_or(default_limit)))
                .collect(),
        }
    }

    /// Key id and per-minute limit for a presented key.
    pub fn check(&self, presented: &str) -> Option<(&str, u32)> {
        let d = digest(presented);
        let mut found = None;
        for (kd, id, limit) in &self.keys {
            if bool::from(kd.ct_eq(&d)) && found.is_none() {
                found = Some((id.as_str(), *limit));
            }
        }
        found
    }
}

/// Extracts the key from `Authorization: Bearer <key>`.
pub fn bearer(header: Option<&str>) -> Option<&str> {
    let value = header?;
    let (scheme, key) = value.split_once(' ')?;
    scheme.eq_ignore_ascii_case("bearer").then(|| key.trim()).filter(|k| !k.is_empty())
}

/// Sliding 60 s window per key id.
#[derive(Debug, Default)]
pub struct RateLimiter {
    hits: Mutex<HashMap<String, VecDeque<Instant>>>,
}

impl RateLimiter {
    pub fn allow(&self, key_id: &str, limit: u32, now: Instant) -> bool {
        let mut hits = self.hits.lock().unwrap_or_else(|p| p.into_inner());
        let q = hits.entry(key_id.to_owned()).or_default();
        while q.front().is_some_and(|t| now.duration_since(*t) >= RATE_WINDOW) {
            q.pop_front();
        }
        if q.len() >= limit as usize {
            return false;
        }
        q.push_back(now);
        true
    }
}
