use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use hpcgate::bench::{bench_latency, bench_throughput, LatencyReport, Stage, Target, ThroughputReport};
use hpcgate::config::{Backend, DeploymentConfig};
use hpcgate::interface::{HttpUpstream, Interface, NoTrigger, Outcome, SchedulerTrigger, SpawnTrigger};
use hpcgate::proxy::{ChannelSettings, ProcessChannel, Proxy, ORIGINAL_COMMAND_ENV};
use hpcgate::report::Report;
use hpcgate::scheduler::{HttpProber, Scheduler};
use hpcgate::simcluster::{replay, MockProfile, Scenario, SimHandle, SimHost, DEFAULT_PROFILE};
use hpcgate::stack::{LocalStack, SpecSource, TickDriver};

#[derive(Parser)]
#[command(name = "hpcgate", version, about = "Serve model endpoints as batch-scheduler jobs")]
struct Cli {
    /// Log filter, e.g. `info` or `hpcgate=debug`.
    #[arg(long, global = true, env = "HPCGATE_LOG", default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start one component.
    Run {
        #[command(subcommand)]
        component: Component,
    },
    /// Latency breakdown at four cut points along the request path.
    BenchLatency(LatencyArgs),
    /// Closed-loop requests per second for each pipeline stage.
    BenchThroughput(ThroughputArgs),
    /// Replay a simulator scenario in virtual time.
    Scenario {
        file: PathBuf,
        /// Scratch directory for the scheduler's files, wiped first;
        /// `<out>/<name>.state` when unset.
        #[arg(long)]
        state_dir: Option<PathBuf>,
        #[arg(long, default_value = "reports")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum Component {
    /// HTTP ingress and keep-alive loop.
    Proxy {
        #[arg(long)]
        config: PathBuf,
    },
    /// Handle one channel invocation on stdin/stdout. The command comes
    /// from the argument or, as under a forced command, the environment.
    Interface {
        #[arg(long)]
        config: PathBuf,
        command: Option<String>,
    },
    /// Reconciliation ticks against the configured workload manager.
    Scheduler {
        #[arg(long)]
        config: PathBuf,
        /// One tick, then exit.
        #[arg(long)]
        once: bool,
        /// Write the tick report here (with `--once`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulated cluster with mock model servers, ticked on a timer.
    Sim {
        #[arg(long)]
        config: PathBuf,
    },
    /// Every component in one process over loopback.
    All {
        #[arg(long)]
        config: PathBuf,
        /// Use the in-process channel. Required; there is no other mode.
        #[arg(long, required = true)]
        local: bool,
    },
}

#[derive(Args)]
struct TargetArgs {
    #[arg(long)]
    config: PathBuf,
    /// Bench a running proxy instead of starting a local stack.
    #[arg(long)]
    ingress: Option<SocketAddr>,
    /// Model to request; the first route when unset.
    #[arg(long)]
    model: Option<String>,
    /// API key; the first configured key when unset.
    #[arg(long)]
    key: Option<String>,
    /// Prompt text sent in every request body.
    #[arg(long, default_value = "Say hello.")]
    prompt: String,
    #[arg(long, default_value = "reports")]
    out: PathBuf,
    /// Seconds to wait for the model to become ready.
    #[arg(long, default_value_t = 120.0)]
    ready_timeout_s: f64,
}

#[derive(Args)]
struct LatencyArgs {
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long, default_value_t = 50)]
    samples: usize,
    /// Fail (exit 3) if the first-token p50 exceeds this.
    #[arg(long)]
    max_p50_ms: Option<f64>,
    /// Fail (exit 3) if first-token p50 minus the model delay exceeds this.
    #[arg(long)]
    max_overhead_ms: Option<f64>,
}

#[derive(Args)]
struct ThroughputArgs {
    #[command(flatten)]
    target: TargetArgs,
    /// ingress-only, channel, full-path or all.
    #[arg(long, default_value = "all")]
    stage: String,
    #[arg(long, default_value_t = 30.0)]
    duration_s: f64,
    #[arg(long, default_value_t = 16)]
    concurrency: usize,
    /// Fail (exit 3) if full-path RPS is below this.
    #[arg(long)]
    min_rps: Option<f64>,
}

/// Maps onto the process exit code.
enum Failure {
    Validation(String),
    Runtime(String),
    Threshold(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Threshold(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Runtime(m) | Failure::Threshold(m) => m,
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn load_config(path: &Path) -> Result<DeploymentConfig> {
    DeploymentConfig::load(path).map_err(|e| Failure::Validation(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::new(&cli.log))
        .with_writer(std::io::stderr)
        .init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run { component } => match component {
            Component::Interface { config, command } => run_interface(&config, command),
            Component::Scheduler { config, once, out } => run_scheduler(&config, once, out.as_deref()),
            Component::Proxy { config } => block_on(run_proxy(&config)),
            Component::Sim { config } => block_on(run_sim(&config)),
            Component::All { config, .. } => block_on(run_all(&config)),
        },
        Command::BenchLatency(args) => block_on(cmd_bench_latency(args)),
        Command::BenchThroughput(args) => block_on(cmd_bench_throughput(args)),
        Command::Scenario { file, state_dir, out } => cmd_scenario(&file, state_dir, &out),
    }
}

fn block_on<F: std::future::Future<Output = Result<()>>>(f: F) -> Result<()> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(runtime)?
        .block_on(f)
}

async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
}

fn run_interface(path: &Path, command: Option<String>) -> Result<()> {
    let cfg = load_config(path)?;
    let command = command
        .or_else(|| std::env::var(ORIGINAL_COMMAND_ENV).ok())
        .ok_or_else(|| Failure::Validation(format!("no command given and {ORIGINAL_COMMAND_ENV} unset")))?;
    let trigger: Arc<dyn SchedulerTrigger> = match cfg.scheduler.backend {
        Backend::Sim => Arc::new(NoTrigger),
        Backend::Slurm => Arc::new(spawn_trigger(&cfg, path).map_err(runtime)?),
    };
    let upstream = Arc::new(HttpUpstream::new(cfg.scheduler.effective_resolver()));
    let iface = Interface::new(cfg.scheduler.paths(), upstream, trigger);
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(runtime)?;
    let outcome = rt.block_on(async {
        let mut stdin = tokio::io::stdin();
        let mut stdout = tokio::io::stdout();
        iface.handle_invocation(command.as_bytes(), &mut stdin, &mut stdout).await
    });
    match outcome {
        Outcome::Pong | Outcome::Forwarded { .. } => Ok(()),
        Outcome::Rejected { code } => Err(Failure::Validation(format!("request rejected with {code}"))),
        Outcome::Aborted => Err(Failure::Runtime("reply aborted".into())),
    }
}

fn spawn_trigger(cfg: &DeploymentConfig, config_path: &Path) -> std::io::Result<SpawnTrigger> {
    if let Some(cmd) = &cfg.scheduler.trigger_command {
        return Ok(SpawnTrigger {
            program: PathBuf::from(&cmd[0]),
            args: cmd[1..].to_vec(),
        });
    }
    let config = std::path::absolute(config_path)?;
    Ok(SpawnTrigger {
        program: std::env::current_exe()?,
        args: vec![
            "run".into(),
            "scheduler".into(),
            "--once".into(),
            "--config".into(),
            config.display().to_string(),
        ],
    })
}

fn slurm_driver(cfg: &DeploymentConfig) -> Result<TickDriver> {
    if cfg.scheduler.backend == Backend::Sim {
        return Err(Failure::Validation(
            "scheduler.backend = \"sim\": the simulated cluster is ticked by `run sim` or `run all --local`".into(),
        ));
    }
    let paths = cfg.scheduler.paths();
    std::fs::create_dir_all(&paths.load_dir).map_err(runtime)?;
    Ok(TickDriver {
        scheduler: Scheduler::new(
            paths,
            Arc::new(cfg.scheduler.slurm.cli()),
            Arc::new(HttpProber::new(cfg.scheduler.effective_resolver())),
            cfg.scheduler.seed,
        ),
        source: SpecSource::from_config(cfg).map_err(|e| Failure::Validation(e.to_string()))?,
    })
}

fn run_scheduler(path: &Path, once: bool, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(path)?;
    let driver = Arc::new(slurm_driver(&cfg)?);
    if !once {
        let stop = Arc::new(AtomicBool::new(false));
        let _ = driver.spawn_timer(cfg.scheduler.tick_interval(), stop).join();
        return Ok(());
    }
    let Some(report) = driver.tick(hpcgate::clock::now_ms()) else {
        // another tick holds the lock; nothing to do
        return Ok(());
    };
    if let Some(dir) = out {
        let mut table = String::new();
        for (svc, d) in &report.desired {
            table.push_str(&format!("{svc:<24} desired {:>3}  avg {:>8.3}\n", d.desired, d.avg_concurrency));
        }
        let passed = report.errors.is_empty();
        Report::new("run scheduler --once", &cfg.hash(), passed, &report)
            .write(dir, "tick", &table)
            .map_err(runtime)?;
    }
    if report.errors.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(report.errors.join("; ")))
    }
}

async fn run_proxy(path: &Path) -> Result<()> {
    let cfg = load_config(path)?;
    let channel = match &cfg.proxy.channel {
        ChannelSettings::Process { program, args, delivery } => Arc::new(ProcessChannel {
            program: program.clone(),
            args: args.clone(),
            delivery: *delivery,
        }),
        ChannelSettings::Local => {
            return Err(Failure::Validation(
                "proxy.channel kind \"local\" only works with `run all --local`".into(),
            ))
        }
    };
    let proxy = Proxy::new(&cfg.proxy, channel).map_err(runtime)?;
    let ingress = tokio::net::TcpListener::bind(cfg.proxy.listen)
        .await
        .map_err(|e| Failure::Runtime(format!("bind {}: {e}", cfg.proxy.listen)))?;
    let operator = tokio::net::TcpListener::bind(cfg.proxy.operator_listen)
        .await
        .map_err(|e| Failure::Runtime(format!("bind {}: {e}", cfg.proxy.operator_listen)))?;
    eprintln!(
        "proxy: ingress http://{} operator http://{} config {}",
        ingress.local_addr().map_err(runtime)?,
        operator.local_addr().map_err(runtime)?,
        cfg.hash()
    );
    proxy.spawn_keepalive();
    let (a, b) = (proxy.ingress_router(), proxy.operator_router());
    tokio::select! {
        r = hpcgate::proxy::serve(ingress, a) => r.map_err(runtime),
        r = hpcgate::proxy::serve(operator, b) => r.map_err(runtime),
        _ = shutdown_signal() => Ok(()),
    }
}

async fn run_sim(path: &Path) -> Result<()> {
    let cfg = load_config(path)?;
    let paths = cfg.scheduler.paths();
    std::fs::create_dir_all(&paths.load_dir).map_err(runtime)?;
    let sim = SimHandle::real_time(&cfg.sim.topology);
    let probe = cfg
        .scheduler
        .services
        .first()
        .map(|s| s.probe_path.clone())
        .unwrap_or_else(hpcgate::scheduler::defaults::probe_path);
    let host = Arc::new(SimHost::new(sim.clone(), cfg.sim.profiles.clone(), &probe));
    host.clone().spawn(Duration::from_millis(cfg.sim.host_sync_ms.max(1)));
    let driver = Arc::new(TickDriver {
        scheduler: Scheduler::new(
            paths,
            Arc::new(sim),
            Arc::new(HttpProber::new(cfg.scheduler.effective_resolver())),
            cfg.scheduler.seed,
        ),
        source: SpecSource::from_config(&cfg).map_err(|e| Failure::Validation(e.to_string()))?,
    });
    let stop = Arc::new(AtomicBool::new(false));
    let timer = driver.spawn_timer(cfg.scheduler.tick_interval(), stop.clone());
    eprintln!("simulated cluster running, config {}", cfg.hash());
    shutdown_signal().await;
    stop.store(true, std::sync::atomic::Ordering::Relaxed);
    let _ = tokio::task::spawn_blocking(move || timer.join()).await;
    host.stop_all().await;
    Ok(())
}

async fn run_all(path: &Path) -> Result<()> {
    let cfg = load_config(path)?;
    let hash = cfg.hash();
    let stack = LocalStack::start(cfg).await.map_err(runtime)?;
    eprintln!(
        "local stack: ingress http://{} operator http://{} config {hash}",
        stack.ingress, stack.operator
    );
    shutdown_signal().await;
    stack.shutdown().await;
    Ok(())
}

/// Resolves the bench target, starting a local stack unless `--ingress`
/// names a running proxy.
async fn prepare(args: &TargetArgs, cfg: DeploymentConfig) -> Result<(Target, Option<LocalStack>, f64)> {
    let route = match &args.model {
        Some(m) => cfg.proxy.routes.iter().find(|r| &r.model == m),
        None => cfg.proxy.routes.first(),
    }
    .cloned()
    .ok_or_else(|| Failure::Validation("no such model route in proxy.routes".into()))?;
    let key = match &args.key {
        Some(k) => k.clone(),
        None => cfg
            .proxy
            .api_keys
            .first()
            .map(|k| k.key.clone())
            .ok_or_else(|| Failure::Validation("no API key configured".into()))?,
    };
    let model_delay = model_delay_ms(&cfg, &route.service);
    let timeout = Duration::from_secs_f64(args.ready_timeout_s);
    let (ingress, stack) = match args.ingress {
        Some(addr) => (addr, None),
        None => {
            let stack = LocalStack::start(cfg).await.map_err(runtime)?;
            if !stack.wait_ready(&route.service, 1, timeout).await {
                return Err(Failure::Runtime(format!("service {} not ready", route.service)));
            }
            (stack.ingress, Some(stack))
        }
    };
    let target = Target {
        ingress,
        key,
        model: route.model,
        prompt: args.prompt.clone(),
    };
    Ok((target, stack, model_delay))
}

/// First-token delay of the mock profile named in the service's template.
fn model_delay_ms(cfg: &DeploymentConfig, service: &str) -> f64 {
    let profile = cfg
        .all_services()
        .ok()
        .and_then(|specs| specs.into_iter().find(|s| s.name == service))
        .and_then(|s| hpcgate::simcluster::JobTemplate::parse(&s.job_template).ok())
        .map(|t| t.profile)
        .unwrap_or_else(|| DEFAULT_PROFILE.to_owned());
    let p = match cfg.sim.profiles.get(&profile) {
        Some(p) => p.clone(),
        None if profile == "null" => MockProfile::null(),
        None => MockProfile::default(),
    };
    p.first_token_delay_ms as f64
}

#[derive(Serialize)]
struct LatencyOutcome<'a> {
    report: &'a LatencyReport,
    max_p50_ms: Option<f64>,
    max_overhead_ms: Option<f64>,
}

async fn cmd_bench_latency(args: LatencyArgs) -> Result<()> {
    let cfg = load_config(&args.target.config)?;
    let hash = cfg.hash();
    let (target, stack, delay) = prepare(&args.target, cfg).await?;
    let result = bench_latency(&target, args.samples, delay).await;
    if let Some(s) = stack {
        s.shutdown().await;
    }
    let report = result.map_err(runtime)?;
    let p50 = report.stages[3].p50_ms;
    let mut breaches = Vec::new();
    if let Some(max) = args.max_p50_ms.filter(|m| p50 > *m) {
        breaches.push(format!("first-token p50 {p50:.2} ms > {max} ms"));
    }
    if let Some(max) = args.max_overhead_ms.filter(|m| report.overhead_ms > *m) {
        breaches.push(format!("overhead {:.2} ms > {max} ms", report.overhead_ms));
    }
    let table = report.table();
    print!("{table}");
    let outcome = LatencyOutcome {
        report: &report,
        max_p50_ms: args.max_p50_ms,
        max_overhead_ms: args.max_overhead_ms,
    };
    Report::new("bench-latency", &hash, breaches.is_empty(), outcome)
        .write(&args.target.out, "bench-latency", &table)
        .map_err(runtime)?;
    if breaches.is_empty() {
        Ok(())
    } else {
        Err(Failure::Threshold(breaches.join("; ")))
    }
}

#[derive(Serialize)]
struct ThroughputOutcome<'a> {
    stages: &'a [ThroughputReport],
    ordering_holds: Option<bool>,
    min_rps: Option<f64>,
}

async fn cmd_bench_throughput(args: ThroughputArgs) -> Result<()> {
    let stages: Vec<Stage> = match args.stage.as_str() {
        "all" => Stage::ALL.to_vec(),
        s => vec![Stage::parse(s).ok_or_else(|| Failure::Validation(format!("unknown stage {s:?}")))?],
    };
    let cfg = load_config(&args.target.config)?;
    let hash = cfg.hash();
    let (target, stack, _) = prepare(&args.target, cfg).await?;
    let mut reports = Vec::new();
    for stage in stages {
        let r = bench_throughput(&target, stage, Duration::from_secs_f64(args.duration_s), args.concurrency).await;
        let aborted = r.aborted;
        reports.push(r);
        if aborted {
            break;
        }
    }
    if let Some(s) = stack {
        s.shutdown().await;
    }
    let ordering_holds = (reports.len() == 3).then(|| reports[0].rps >= reports[1].rps && reports[1].rps >= reports[2].rps);
    let mut breaches = Vec::new();
    for r in &reports {
        if r.aborted {
            breaches.push(format!("{} aborted at {:.2}% errors", r.stage.name(), r.error_rate() * 100.0));
        }
    }
    if ordering_holds == Some(false) {
        breaches.push("stage ordering ingress >= channel >= full-path violated".into());
    }
    if let Some(min) = args.min_rps {
        if let Some(full) = reports.iter().find(|r| r.stage == Stage::FullPath).filter(|r| r.rps < min) {
            breaches.push(format!("full-path {:.1} RPS < {min}", full.rps));
        }
    }
    let table = ThroughputReport::table(&reports);
    print!("{table}");
    let outcome = ThroughputOutcome {
        stages: &reports,
        ordering_holds,
        min_rps: args.min_rps,
    };
    Report::new("bench-throughput", &hash, breaches.is_empty(), outcome)
        .write(&args.target.out, "bench-throughput", &table)
        .map_err(runtime)?;
    if breaches.is_empty() {
        Ok(())
    } else {
        Err(Failure::Threshold(breaches.join("; ")))
    }
}

fn cmd_scenario(file: &Path, state_dir: Option<PathBuf>, out: &Path) -> Result<()> {
    let scenario = Scenario::load(file).map_err(Failure::Validation)?;
    let text = std::fs::read(file).map_err(runtime)?;
    let hash: String = {
        use sha2::Digest;
        sha2::Sha256::digest(&text)[..8].iter().map(|b| format!("{b:02x}")).collect()
    };
    let name = file.file_stem().and_then(|s| s.to_str()).unwrap_or("scenario");
    let dir = state_dir.unwrap_or_else(|| out.join(format!("{name}.state")));
    if dir.exists() {
        // stale files from an earlier replay would leak into this one
        std::fs::remove_dir_all(&dir).map_err(runtime)?;
    }
    let report = replay(&scenario, &dir).map_err(Failure::Runtime)?;
    let mut table = format!(
        "{:>10} {:<20} {:>8} {:>8} {:>8} {:>10}\n",
        "t (s)", "service", "desired", "ready", "jobs", "avg load"
    );
    for t in &report.ticks {
        for (svc, s) in &t.services {
            table.push_str(&format!(
                "{:>10.1} {:<20} {:>8} {:>8} {:>8} {:>10.3}\n",
                t.at_ms as f64 / 1000.0,
                svc,
                s.desired,
                s.ready,
                s.live_jobs,
                s.avg_concurrency
            ));
        }
    }
    table.push_str(&format!(
        "submissions {}  ready cancellations {}  startup cancellations {}  errors {}  gpu conservation {}\n",
        report.submissions,
        report.ready_cancellations,
        report.startup_cancellations,
        report.errors.len(),
        if report.conservation_held { "held" } else { "VIOLATED" }
    ));
    let passed = report.conservation_held;
    Report::new("scenario", &hash, passed, &report)
        .write(out, name, &table)
        .map_err(runtime)?;
    println!(
        "{} ticks, {} submissions, gpu conservation {}; report in {}",
        report.ticks.len(),
        report.submissions,
        if passed { "held" } else { "VIOLATED" },
        out.display()
    );
    if passed {
        Ok(())
    } else {
        Err(Failure::Threshold("gpu conservation violated".into()))
    }
}
