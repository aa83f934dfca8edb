//! Measurement harness: latency breakdown at four cut points along the
//! request path, and closed-loop throughput per stage.

use std::fmt::Write as _;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper::client::conn::http1::SendRequest;
use hyper::header::{AUTHORIZATION, CONTENT_TYPE, HOST};
use hyper_util::rt::TokioIo;
use serde::Serialize;
use thiserror::Error;
use tokio::net::TcpStream;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("connect {0}: {1}")]
    Connect(SocketAddr, String),
    #[error("request failed: {0}")]
    Request(String),
    #[error("unexpected status {0} from {1}")]
    Status(u16, &'static str),
    #[error("service {0} is not ready")]
    NotReady(String),
}

/// One keep-alive HTTP/1.1 connection, reopened after any failure.
pub struct HttpClient {
    addr: SocketAddr,
    key: Option<String>,
    sender: Option<SendRequest<Full<Bytes>>>,
}

pub struct Reply {
    pub status: u16,
    pub body: Bytes,
    /// Time from send until the first non-empty body frame.
    pub first_byte: Duration,
}

impl HttpClient {
    pub fn new(addr: SocketAddr, key: Option<&str>) -> Self {
        HttpClient {
            addr,
            key: key.map(str::to_owned),
            sender: None,
        }
    }

    async fn sender(&mut self) -> Result<&mut SendRequest<Full<Bytes>>, BenchError> {
        if self.sender.as_ref().is_none_or(|s| s.is_closed()) {
            let stream = TcpStream::connect(self.addr)
                .await
                .map_err(|e| BenchError::Connect(self.addr, e.to_string()))?;
            let _ = stream.set_nodelay(true);
            let (sender, conn) = hyper::client::conn::http1::handshake(TokioIo::new(stream))
                .await
                .map_err(|e| BenchError::Connect(self.addr, e.to_string()))?;
            tokio::spawn(async move {
                let _ = conn.await;
            });
            self.sender = Some(sender);
        }
        Ok(self.sender.as_mut().expect("just connected"))
    }

    /// Sends a request and reads the whole reply. With `until_first`, stops
    /// after the first body frame and drops the connection.
    pub async fn request(
        &mut self,
        method: &str,
        path: &str,
        body: Option<Bytes>,
        until_first: bool,
    ) -> Result<Reply, BenchError> {
        let mut builder = hyper::Request::builder()
            .method(method)
            .uri(path)
            .header(HOST, self.addr.to_string());
        if let Some(key) = &self.key {
            builder = builder.header(AUTHORIZATION, format!("Bearer {key}"));
        }
        if body.is_some() {
            builder = builder.header(CONTENT_TYPE, "application/json");
        }
        let request = builder
            .body(Full::new(body.unwrap_or_default()))
            .map_err(|e| BenchError::Request(e.to_string()))?;
        let start = Instant::now();
        let result = async {
            let sender = self.sender().await?;
            sender.ready().await.map_err(|e| BenchError::Request(e.to_string()))?;
            let response = sender
                .send_request(request)
                .await
                .map_err(|e| BenchError::Request(e.to_string()))?;
            let status = response.status().as_u16();
            let mut body = response.into_body();
            let mut out = Vec::new();
            let mut first_byte = None;
            while let Some(frame) = body.frame().await {
                let frame = frame.map_err(|e| BenchError::Request(e.to_string()))?;
                if let Ok(data) = frame.into_data() {
                    if data.is_empty() {
                        continue;
                    }
                    first_byte.get_or_insert_with(|| start.elapsed());
                    out.extend_from_slice(&data);
                    if until_first {
                        break;
                    }
                }
            }
            Ok::<_, BenchError>((status, out, first_byte, until_first))
        }
        .await;
        match result {
            Ok((status, out, first_byte, cut)) => {
                if cut {
                    self.sender = None;
                }
                Ok(Reply {
                    status,
                    body: Bytes::from(out),
                    first_byte: first_byte.unwrap_or_else(|| start.elapsed()),
                })
            }
            Err(e) => {
                self.sender = None;
                Err(e)
            }
        }
    }
}

/// Request body for a completion carrying `prompt`.
pub fn completion_body(model: &str, prompt: &str, stream: bool) -> Bytes {
    let body = serde_json::json!({
        "model": model,
        "stream": stream,
        "messages": [{"role": "user", "content": prompt}],
    });
    Bytes::from(body.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Ingress only: the proxy answers `/health` itself.
    IngressOnly,
    /// Proxy plus one channel round trip to the interface.
    Channel,
    /// All the way to a model instance.
    FullPath,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::IngressOnly, Stage::Channel, Stage::FullPath];

    pub fn name(self) -> &'static str {
        match self {
            Stage::IngressOnly => "ingress-only",
            Stage::Channel => "channel",
            Stage::FullPath => "full-path",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }
}

#[derive(Debug, Clone)]
pub struct Target {
    pub ingress: SocketAddr,
    pub key: String,
    pub model: String,
    /// Planted in every request body; must never reach a file.
    pub prompt: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageStats {
    pub name: String,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub p50_ms: f64,
    /// Mean minus the previous row's mean.
    pub diff_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencyReport {
    pub samples: usize,
    pub model_delay_ms: f64,
    pub stages: Vec<StageStats>,
    /// Stage (d) p50 minus the model's own first-token delay.
    pub overhead_ms: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

const LATENCY_ROWS: [&str; 4] = [
    "(a) proxy self-probe",
    "(b) channel round trip",
    "(c) instance probe",
    "(d) first token",
];

/// Runs `samples` rounds of the four probes back to back and reports each
/// row's latency from the client's point of view.
pub async fn bench_latency(target: &Target, samples: usize, model_delay_ms: f64) -> Result<LatencyReport, BenchError> {
    let mut client = HttpClient::new(target.ingress, Some(&target.key));
    let model_health = format!("/health?model={}", target.model);
    let reply = client.request("GET", &model_health, None, false).await?;
    if reply.status != 200 {
        return Err(BenchError::NotReady(target.model.clone()));
    }
    let body = completion_body(&target.model, &target.prompt, true);
    let mut rows: [Vec<f64>; 4] = Default::default();
    // One connection per row so the cut-off stream in (d) does not cost
    // the next (a) a fresh handshake.
    let mut clients: [HttpClient; 4] = std::array::from_fn(|_| HttpClient::new(target.ingress, Some(&target.key)));
    for _ in 0..samples.max(1) {
        let probes: [(&str, &str, Option<Bytes>, bool); 4] = [
            ("GET", "/health", None, false),
            ("GET", "/health?deep=channel", None, false),
            ("GET", &model_health, None, false),
            ("POST", "/v1/chat/completions", Some(body.clone()), true),
        ];
        for (i, (method, path, body, first)) in probes.into_iter().enumerate() {
            let start = Instant::now();
            let reply = clients[i]
                .request(method, path, body, first)
                .await
                .map_err(|e| BenchError::Request(format!("{}: {e}", LATENCY_ROWS[i])))?;
            if reply.status != 200 {
                return Err(BenchError::Status(reply.status, LATENCY_ROWS[i]));
            }
            let t = if first { reply.first_byte } else { start.elapsed() };
            rows[i].push(t.as_secs_f64() * 1000.0);
        }
    }
    let mut stages = Vec::new();
    let mut prev = 0.0;
    for (name, xs) in LATENCY_ROWS.iter().zip(&rows) {
        let (mean, std) = mean_std(xs);
        stages.push(StageStats {
            name: (*name).to_owned(),
            mean_ms: mean,
            std_ms: std,
            p50_ms: median(xs),
            diff_ms: mean - prev,
        });
        prev = mean;
    }
    let overhead_ms = stages[3].p50_ms - model_delay_ms;
    Ok(LatencyReport {
        samples: samples.max(1),
        model_delay_ms,
        stages,
        overhead_ms,
    })
}

impl LatencyReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:>22} {:>10} {:>10}", "Stage", "Agg. Avg. (std.) in ms", "p50", "Diff.");
        for s in &self.stages {
            let _ = writeln!(
                out,
                "{:<24} {:>22} {:>10.2} {:>10.2}",
                s.name,
                format!("{:.2} ({:.2})", s.mean_ms, s.std_ms),
                s.p50_ms,
                s.diff_ms
            );
        }
        let _ = writeln!(
            out,
            "samples {}  model delay {:.1} ms  non-model overhead {:.2} ms",
            self.samples, self.model_delay_ms, self.overhead_ms
        );
        out
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ThroughputReport {
    pub stage: Stage,
    pub concurrency: usize,
    pub duration_s: f64,
    pub requests: u64,
    pub errors: u64,
    pub rps: f64,
    /// Stopped early because errors passed 1% of requests.
    pub aborted: bool,
}

impl ThroughputReport {
    pub fn error_rate(&self) -> f64 {
        let total = self.requests + self.errors;
        if total == 0 {
            0.0
        } else {
            self.errors as f64 / total as f64
        }
    }

    pub fn table(reports: &[ThroughputReport]) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:>10} {:>10} {:>8} {:>10} {:>8}",
            "Stage", "RPS", "Requests", "Errors", "Seconds", "Workers"
        );
        for r in reports {
            let _ = writeln!(
                out,
                "{:<14} {:>10.1} {:>10} {:>8} {:>10.1} {:>8}{}",
                r.stage.name(),
                r.rps,
                r.requests,
                r.errors,
                r.duration_s,
                r.concurrency,
                if r.aborted { "  ABORTED" } else { "" }
            );
        }
        out
    }
}

/// Closed-loop load: `concurrency` workers each send the next request as
/// soon as the previous reply has been read in full.
pub async fn bench_throughput(
    target: &Target,
    stage: Stage,
    duration: Duration,
    concurrency: usize,
) -> ThroughputReport {
    let ok = Arc::new(AtomicU64::new(0));
    let errors = Arc::new(AtomicU64::new(0));
    let abort = Arc::new(AtomicBool::new(false));
    let start = Instant::now();
    let deadline = start + duration;
    let body = completion_body(&target.model, &target.prompt, false);
    let mut workers = Vec::new();
    for _ in 0..concurrency.max(1) {
        let (ok, errors, abort, body) = (ok.clone(), errors.clone(), abort.clone(), body.clone());
        let mut client = HttpClient::new(target.ingress, Some(&target.key));
        workers.push(tokio::spawn(async move {
            while Instant::now() < deadline && !abort.load(Ordering::Relaxed) {
                let result = match stage {
                    Stage::IngressOnly => client.request("GET", "/health", None, false).await,
                    Stage::Channel => client.request("GET", "/health?deep=channel", None, false).await,
                    Stage::FullPath => client.request("POST", "/v1/chat/completions", Some(body.clone()), false).await,
                };
                match result {
                    Ok(r) if r.status == 200 => {
                        ok.fetch_add(1, Ordering::Relaxed);
                    }
                    other => {
                        if let Err(e) = &other {
                            tracing::debug!(error = %e, "bench request failed");
                        }
                        let e = errors.fetch_add(1, Ordering::Relaxed) + 1;
                        let total = e + ok.load(Ordering::Relaxed);
                        if total >= 100 && e * 100 > total {
                            abort.store(true, Ordering::Relaxed);
                        }
                        // brief pause so a dead stage does not spin
                        tokio::time::sleep(Duration::from_millis(5)).await;
                    }
                }
            }
        }));
    }
    for w in workers {
        let _ = w.await;
    }
    let elapsed = start.elapsed().as_secs_f64();
    let requests = ok.load(Ordering::Relaxed);
    ThroughputReport {
        stage,
        concurrency: concurrency.max(1),
        duration_s: elapsed,
        requests,
        errors: errors.load(Ordering::Relaxed),
        rps: requests as f64 / elapsed,
        aborted: abort.load(Ordering::Relaxed),
    }
}
