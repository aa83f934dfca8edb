/// Simulated job script: space-separated `key=value` pairs, e.g.
/// `gpus=2 cold_start=600 profile=mixtral`. `gpus` and `cold_start`
/// (seconds, fractions allowed) are required.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobTemplate {
    pub gpus: u32,
    pub cold_start_ms: u64,
    pub profile: String,
}

pub const DEFAULT_PROFILE: &str = "default";

impl JobTemplate {
    pub fn parse(text: &str) -> Result<JobTemplate, String> {
        let mut gpus = None;
        let mut cold_start_ms = None;
        let mut profile = None;
        for token in text.split_whitespace() {
            let (key, value) = token
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got {token:?}"))?;
            match key {
                "gpus" => {
                    let n: u32 = value.parse().map_err(|_| format!("bad gpus {value:?}"))?;
                    if n == 0 {
                        return Err("gpus must be at least 1".into());
                    }
                    gpus = Some(n);
                }
                "cold_start" => {
                    let s: f64 = value
                        .parse()
                        .ok()
                        .filter(|s: &f64| s.is_finite() && *s >= 0.0)
                        .ok_or_else(|| format!("bad cold_start {value:?}"))?;
                    cold_start_ms = Some((s * 1000.0).round() as u64);
                }
                "profile" => {
                    if value.is_empty() {
                        return Err("empty profile".into());
                    }
                    profile = Some(value.to_owned());
                }
                other => return Err(format!("unknown template key {other:?}")),
            }
        }
        Ok(JobTemplate {
            gpus: gpus.ok_or("template lacks gpus")?,
            cold_start_ms: cold_start_ms.ok_or("template lacks cold_start")?,
            profile: profile.unwrap_or_else(|| DEFAULT_PROFILE.to_owned()),
        })
    }
}
