//! Everything in one process over loopback: simulated cluster with mock
//! model servers, timer-driven scheduler, interface behind an in-process
//! channel, and the proxy's ingress and operator listeners.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use crate::config::{ConfigError, DeploymentConfig};
use crate::interface::{HttpUpstream, Interface, SchedulerTrigger, WorkerTrigger};
use crate::proxy::{Channel, ChannelStatus, LocalChannel, Proxy};
use crate::resolve::NodeResolver;
use crate::routing::{RouteState, RoutingTable};
use crate::scheduler::{ConfigSwapper, HttpProber, Scheduler, ServiceSpec, TickReport};
use crate::simcluster::{SimHandle, SimHost};

/// Where each tick takes its service list from.
pub enum SpecSource {
    Static(Vec<ServiceSpec>),
    Swap(ConfigSwapper),
}

impl SpecSource {
    pub fn from_config(cfg: &DeploymentConfig) -> Result<SpecSource, ConfigError> {
        Ok(match cfg.scheduler.swapper()? {
            Some(s) => SpecSource::Swap(s),
            None => SpecSource::Static(cfg.scheduler.services.clone()),
        })
    }

    pub fn current(&self, now_ms: u64) -> Vec<ServiceSpec> {
        match self {
            SpecSource::Static(specs) => specs.clone(),
            SpecSource::Swap(s) => s.swap_config(now_ms).specs,
        }
    }
}

/// A scheduler plus its service list; one call is one locked tick.
pub struct TickDriver {
    pub scheduler: Scheduler,
    pub source: SpecSource,
}

impl TickDriver {
    pub fn tick(&self, now_ms: u64) -> Option<TickReport> {
        let specs = self.source.current(now_ms);
        match self.scheduler.run_tick(&specs, now_ms) {
            Ok(Some(report)) => {
                for e in &report.errors {
                    tracing::warn!(error = %e, "tick error");
                }
                Some(report)
            }
            Ok(None) => {
                tracing::debug!("tick skipped, lock busy");
                None
            }
            Err(e) => {
                tracing::warn!(error = %e, "tick failed");
                None
            }
        }
    }

    /// Ticks every `interval` on a dedicated thread until `stop` is set.
    pub fn spawn_timer(self: Arc<Self>, interval: Duration, stop: Arc<AtomicBool>) -> std::thread::JoinHandle<()> {
        std::thread::Builder::new()
            .name("scheduler-timer".into())
            .spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    let started = Instant::now();
                    self.tick(crate::clock::now_ms());
                    let rest = interval.saturating_sub(started.elapsed());
                    let until = Instant::now() + rest;
                    while !stop.load(Ordering::Relaxed) && Instant::now() < until {
                        std::thread::sleep((until - Instant::now()).min(Duration::from_millis(50)));
                    }
                }
            })
            .expect("spawn scheduler timer")
    }
}

pub struct LocalStack {
    pub config: DeploymentConfig,
    pub sim: SimHandle,
    pub host: Arc<SimHost>,
    pub driver: Arc<TickDriver>,
    pub interface: Arc<Interface>,
    pub channel: Arc<LocalChannel>,
    pub proxy: Arc<Proxy>,
    pub ingress: SocketAddr,
    pub operator: SocketAddr,
    stop: Arc<AtomicBool>,
    timer: Option<std::thread::JoinHandle<()>>,
    tasks: Vec<JoinHandle<()>>,
}

#[derive(Debug, thiserror::Error)]
pub enum StackError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl LocalStack {
    /// Starts every component. Must run inside a tokio runtime.
    pub async fn start(config: DeploymentConfig) -> Result<LocalStack, StackError> {
        Self::start_with(config, |c| c).await
    }

    /// Like [`LocalStack::start`], with the proxy talking through whatever
    /// `wrap` builds around the in-process channel.
    pub async fn start_with<F>(config: DeploymentConfig, wrap: F) -> Result<LocalStack, StackError>
    where
        F: FnOnce(Arc<LocalChannel>) -> Arc<dyn Channel>,
    {
        let paths = config.scheduler.paths();
        for dir in [paths.table.parent(), Some(paths.load_dir.as_path()), paths.lock.parent()]
            .into_iter()
            .flatten()
            .filter(|d| !d.as_os_str().is_empty())
        {
            std::fs::create_dir_all(dir)?;
        }

        let sim = SimHandle::real_time(&config.sim.topology);
        let probe_path = config
            .scheduler
            .services
            .first()
            .map(|s| s.probe_path.clone())
            .unwrap_or_else(crate::scheduler::defaults::probe_path);
        let host = Arc::new(SimHost::new(sim.clone(), config.sim.profiles.clone(), &probe_path));
        let mut tasks = vec![host.clone().spawn(Duration::from_millis(config.sim.host_sync_ms.max(1)))];

        let scheduler = Scheduler::new(
            paths.clone(),
            Arc::new(sim.clone()),
            Arc::new(HttpProber::new(NodeResolver::loopback())),
            config.scheduler.seed,
        );
        let driver = Arc::new(TickDriver {
            scheduler,
            source: SpecSource::from_config(&config)?,
        });
        let d = driver.clone();
        let trigger: Arc<dyn SchedulerTrigger> = Arc::new(WorkerTrigger::new(move || {
            d.tick(crate::clock::now_ms());
        }));
        let mut interface = Interface::new(paths, Arc::new(HttpUpstream::new(NodeResolver::loopback())), trigger);
        if let Some(seed) = config.scheduler.seed {
            interface = interface.with_seed(seed);
        }
        let interface = Arc::new(interface);
        let channel = Arc::new(LocalChannel::new(interface.clone()));
        let proxy = Proxy::new(&config.proxy, wrap(channel.clone()))?;

        let ingress_l = bind(config.proxy.listen).await?;
        let operator_l = bind(config.proxy.operator_listen).await?;
        let ingress = ingress_l.local_addr()?;
        let operator = operator_l.local_addr()?;
        let router = proxy.ingress_router();
        tasks.push(tokio::spawn(async move {
            if let Err(e) = crate::proxy::serve(ingress_l, router).await {
                tracing::error!(error = %e, "ingress stopped");
            }
        }));
        let router = proxy.operator_router();
        tasks.push(tokio::spawn(async move {
            if let Err(e) = crate::proxy::serve(operator_l, router).await {
                tracing::error!(error = %e, "operator listener stopped");
            }
        }));
        tasks.push(proxy.spawn_keepalive());

        let stop = Arc::new(AtomicBool::new(false));
        let timer = driver.clone().spawn_timer(config.scheduler.tick_interval(), stop.clone());
        tracing::info!(%ingress, %operator, "local stack up");
        Ok(LocalStack {
            config,
            sim,
            host,
            driver,
            interface,
            channel,
            proxy,
            ingress,
            operator,
            stop,
            timer: Some(timer),
            tasks,
        })
    }

    pub fn table(&self) -> RoutingTable {
        RoutingTable::load(&self.driver.scheduler.paths().table).unwrap_or_default()
    }

    pub fn ready_count(&self, service: &str) -> usize {
        self.table().count(service, RouteState::Ready)
    }

    /// Waits until `service` has at least `n` READY instances and the
    /// proxy has seen them in a pong.
    pub async fn wait_ready(&self, service: &str, n: usize, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            let seen = self
                .proxy
                .list_models()
                .models
                .iter()
                .any(|m| m.service == service && m.ready as usize >= n);
            if seen && self.ready_count(service) >= n && self.proxy.status() == ChannelStatus::Connected {
                return true;
            }
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
        false
    }

    /// Stops the scheduler timer, listeners and mock servers.
    pub async fn shutdown(mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for t in &self.tasks {
            t.abort();
        }
        if let Some(timer) = self.timer.take() {
            let _ = tokio::task::spawn_blocking(move || timer.join()).await;
        }
        self.host.stop_all().await;
    }
}

impl Drop for LocalStack {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for t in &self.tasks {
            t.abort();
        }
    }
}

async fn bind(addr: SocketAddr) -> Result<TcpListener, StackError> {
    TcpListener::bind(addr).await.map_err(|source| StackError::Bind { addr, source })
}
