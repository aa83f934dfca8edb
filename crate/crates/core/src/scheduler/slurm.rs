//! Workload-manager binding that shells out to `sbatch`, `squeue` and
//! `scancel`. Arguments are passed as argv, never through a shell.

use std::process::Command;

use super::{ClusterError, JobListing, JobState, SubmitEnv, WorkloadManager};

#[derive(Debug, Clone)]
pub struct SlurmCli {
    pub sbatch: String,
    pub squeue: String,
    pub scancel: String,
    /// Extra `sbatch` arguments, e.g. partition or account.
    pub submit_args: Vec<String>,
}

impl Default for SlurmCli {
    fn default() -> Self {
        SlurmCli {
            sbatch: "sbatch".into(),
            squeue: "squeue".into(),
            scancel: "scancel".into(),
            submit_args: Vec::new(),
        }
    }
}

fn run(program: &str, args: &[String]) -> Result<String, String> {
    let out = Command::new(program)
        .args(args)
        .output()
        .map_err(|e| format!("{program}: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "{program} exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// `--time` value in `D-HH:MM:SS`.
pub fn format_walltime(seconds: u64) -> String {
    let days = seconds / 86_400;
    let rem = seconds % 86_400;
    format!("{days}-{:02}:{:02}:{:02}", rem / 3600, (rem % 3600) / 60, rem % 60)
}

/// Parses squeue's time-left column: `[D-]HH:MM:SS`, `MM:SS` or `SS`.
/// Unlimited or unset reads as `u64::MAX`.
pub fn parse_time_left(s: &str) -> Option<u64> {
    match s {
        "UNLIMITED" | "NOT_SET" | "INVALID" => return Some(u64::MAX),
        _ => {}
    }
    let (days, clock) = match s.split_once('-') {
        Some((d, rest)) => (d.parse::<u64>().ok()?, rest),
        None => (0, s),
    };
    let parts: Vec<u64> = clock
        .split(':')
        .map(|p| p.parse::<u64>().ok())
        .collect::<Option<_>>()?;
    let secs = match parts[..] {
        [h, m, s] => h * 3600 + m * 60 + s,
        [m, s] => m * 60 + s,
        [s] => s,
        _ => return None,
    };
    Some(days * 86_400 + secs)
}

/// Parses `squeue -h -o "%i|%T|%N|%L"` output.
pub fn parse_squeue(text: &str) -> Vec<JobListing> {
    text.lines()
        .filter_map(|line| {
            let mut f = line.trim().split('|');
            let (id, state, node, left) = (f.next()?, f.next()?, f.next()?, f.next()?);
            let state = match state {
                "PENDING" | "CONFIGURING" | "REQUEUED" => JobState::Pending,
                "RUNNING" | "COMPLETING" => JobState::Running,
                _ => return None,
            };
            let node = match node.trim() {
                "" | "(null)" => None,
                // first node of a multi-node allocation
                n => Some(n.split(',').next().unwrap_or(n).to_owned()),
            };
            Some(JobListing {
                job_id: id.trim().to_owned(),
                state,
                node,
                remaining_walltime_s: parse_time_left(left.trim())?,
            })
        })
        .collect()
}

impl WorkloadManager for SlurmCli {
    fn submit(&self, template: &str, walltime_s: u64, env: &SubmitEnv) -> Result<String, ClusterError> {
        let mut args = vec![
            "--parsable".to_owned(),
            format!("--time={}", format_walltime(walltime_s)),
            format!("--export=ALL,SERVICE={},PORT={}", env.service, env.port),
        ];
        args.extend(self.submit_args.iter().cloned());
        args.push(template.to_owned());
        let out = run(&self.sbatch, &args).map_err(ClusterError::SubmitFailed)?;
        let id = out.trim().split(';').next().unwrap_or_default().to_owned();
        if id.is_empty() || !crate::routing::valid_job_id(&id) {
            return Err(ClusterError::SubmitFailed(format!("unexpected sbatch output {out:?}")));
        }
        Ok(id)
    }

    fn list(&self) -> Result<Vec<JobListing>, ClusterError> {
        let args = ["-h", "--me", "-o", "%i|%T|%N|%L"].map(String::from);
        let out = run(&self.squeue, &args).map_err(ClusterError::Unreachable)?;
        Ok(parse_squeue(&out))
    }

    fn cancel(&self, job_id: &str) -> Result<(), ClusterError> {
        run(&self.scancel, &[job_id.to_owned()])
            .map(|_| ())
            .map_err(|_| ClusterError::UnknownJob(job_id.to_owned()))
    }
}
