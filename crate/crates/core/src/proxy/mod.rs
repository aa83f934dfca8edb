//! HTTP ingress in front of the command channel.
//!
//! Requests are authenticated by API key, rate limited, mapped from model
//! name to service and sent as one channel invocation each; the framed
//! reply is streamed back as it arrives. A keep-alive task pings the
//! channel every few seconds, keeps the service summary that backs
//! `/v1/models`, and reconnects with capped exponential backoff.

mod auth;
mod channel;
mod state;

pub use auth::{bearer, ApiKey, KeyRing, RateLimiter, DEFAULT_RATE_LIMIT_PER_MINUTE};
pub use channel::{
    Channel, ChannelError, ChannelReader, CommandDelivery, LinkMode, LocalChannel, ProcessChannel,
    ORIGINAL_COMMAND_ENV,
};
pub use state::{ChannelState, ChannelStatus, Metrics};

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::Ordering;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::serve::ListenerExt;
use axum::Router;
use bytes::Bytes;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::io::AsyncReadExt;
use tokio::net::TcpListener;
use tokio::sync::Notify;

use crate::wire::{
    encode_request, ApiPath, FrameDecoder, FrameEvent, Method, Pong, ServiceName, ServiceSummary, WireRequest,
    MAX_BODY_BYTES,
};

const READ_BUF: usize = 16 * 1024;
const MAX_PONG_BYTES: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteBinding {
    pub model: String,
    pub service: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChannelSettings {
    /// In-process interface; only available when the whole stack runs in
    /// one process.
    #[default]
    Local,
    Process {
        program: String,
        #[serde(default)]
        args: Vec<String>,
        #[serde(default = "ChannelSettings::default_delivery")]
        delivery: CommandDelivery,
    },
}

impl ChannelSettings {
    fn default_delivery() -> CommandDelivery {
        CommandDelivery::Argument
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeepaliveTiming {
    pub ping_interval: Duration,
    pub ping_timeout: Duration,
    pub backoff_initial: Duration,
    pub backoff_max: Duration,
}

impl Default for KeepaliveTiming {
    fn default() -> Self {
        KeepaliveTiming {
            ping_interval: Duration::from_secs(5),
            ping_timeout: Duration::from_secs(4),
            backoff_initial: Duration::from_secs(1),
            backoff_max: Duration::from_secs(8),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxySettings {
    #[serde(default = "ProxySettings::default_listen")]
    pub listen: SocketAddr,
    #[serde(default = "ProxySettings::default_operator")]
    pub operator_listen: SocketAddr,
    #[serde(default)]
    pub channel: ChannelSettings,
    #[serde(default)]
    pub routes: Vec<RouteBinding>,
    #[serde(default)]
    pub api_keys: Vec<ApiKey>,
    #[serde(default = "ProxySettings::default_rate")]
    pub rate_limit_per_minute: u32,
    #[serde(default = "ProxySettings::default_ping_interval")]
    pub ping_interval_ms: u64,
    #[serde(default = "ProxySettings::default_ping_timeout")]
    pub ping_timeout_ms: u64,
    #[serde(default = "ProxySettings::default_backoff_initial")]
    pub backoff_initial_ms: u64,
    #[serde(default = "ProxySettings::default_backoff_max")]
    pub backoff_max_ms: u64,
    /// `epoch_ms key_id model status` per request; never bodies.
    #[serde(default)]
    pub access_log: Option<PathBuf>,
}

impl ProxySettings {
    fn default_listen() -> SocketAddr {
        SocketAddr::from(([127, 0, 0, 1], 8080))
    }
    fn default_operator() -> SocketAddr {
        SocketAddr::from(([127, 0, 0, 1], 9090))
    }
    fn default_rate() -> u32 {
        DEFAULT_RATE_LIMIT_PER_MINUTE
    }
    fn default_ping_interval() -> u64 {
        5_000
    }
    fn default_ping_timeout() -> u64 {
        4_000
    }
    fn default_backoff_initial() -> u64 {
        1_000
    }
    fn default_backoff_max() -> u64 {
        8_000
    }

    pub fn timing(&self) -> KeepaliveTiming {
        KeepaliveTiming {
            ping_interval: Duration::from_millis(self.ping_interval_ms),
            ping_timeout: Duration::from_millis(self.ping_timeout_ms),
            backoff_initial: Duration::from_millis(self.backoff_initial_ms),
            backoff_max: Duration::from_millis(self.backoff_max_ms),
        }
    }
}

impl Default for ProxySettings {
    fn default() -> Self {
        toml::from_str("").expect("all proxy settings have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelEntry {
    pub id: String,
    pub service: String,
    pub ready: u32,
    pub desired: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelList {
    pub models: Vec<ModelEntry>,
    pub status: ChannelStatus,
    pub last_pong_age_s: Option<f64>,
    pub stale: bool,
}

pub struct Proxy {
    routes: HashMap<String, ServiceName>,
    keys: KeyRing,
    limiter: RateLimiter,
    timing: KeepaliveTiming,
    channel: Arc<dyn Channel>,
    state: Mutex<ChannelState>,
    metrics: Metrics,
    wake: Notify,
    access_log: Option<Mutex<std::fs::File>>,
}

/// Decrements the in-flight gauge when a reply finishes or is dropped.
struct InFlight(Arc<Proxy>);

impl Drop for InFlight {
    fn drop(&mut self) {
        self.0.metrics.in_flight.fetch_sub(1, Ordering::Relaxed);
    }
}

type Failure = (StatusCode, String);

fn error_response((status, message): Failure) -> Response {
    let body = json!({"error": {"message": message, "code": status.as_u16()}});
    (status, [(header::CONTENT_TYPE, "application/json")], body.to_string()).into_response()
}

#[derive(Deserialize)]
struct CompletionProbe<'a> {
    #[serde(borrow, default)]
    model: Option<Cow<'a, str>>,
    #[serde(default)]
    stream: Option<bool>,
}

impl Proxy {
    pub fn new(settings: &ProxySettings, channel: Arc<dyn Channel>) -> std::io::Result<Arc<Proxy>> {
        let access_log = match &settings.access_log {
            Some(path) => {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)?;
                }
                let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
                Some(Mutex::new(f))
            }
            None => None,
        };
        let routes = settings
            .routes
            .iter()
            .filter_map(|r| Some((r.model.clone(), ServiceName::new(&r.service)?)))
            .collect();
        Ok(Arc::new(Proxy {
            routes,
            keys: KeyRing::new(&settings.api_keys, settings.rate_limit_per_minute),
            limiter: RateLimiter::default(),
            timing: settings.timing(),
            channel,
            state: Mutex::new(ChannelState::default()),
            metrics: Metrics::default(),
            wake: Notify::new(),
            access_log,
        }))
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn channel_state(&self) -> ChannelState {
        self.state.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    /// Current status; a pong older than two intervals no longer counts
    /// as connected even if the keep-alive task has not noticed yet.
    pub fn status(&self) -> ChannelStatus {
        let st = self.state.lock().unwrap_or_else(|p| p.into_inner());
        match (st.status, st.last_pong) {
            (ChannelStatus::Connected, Some(t)) if t.elapsed() >= 2 * self.timing.ping_interval => {
                ChannelStatus::Reconnecting
            }
            (s, _) => s,
        }
    }

    fn last_pong_age(&self) -> Option<f64> {
        self.channel_state().last_pong.map(|t| t.elapsed().as_secs_f64())
    }

    /// Marks the channel suspect after a failed invocation and wakes the
    /// keep-alive task.
    fn channel_failed(&self) {
        {
            let mut st = self.state.lock().unwrap_or_else(|p| p.into_inner());
            if st.status == ChannelStatus::Connected {
                st.status = ChannelStatus::Reconnecting;
                tracing::warn!("channel invocation failed, reconnecting");
            }
        }
        self.wake.notify_one();
    }

    fn record_pong(&self, pong: Pong) -> bool {
        let mut st = self.state.lock().unwrap_or_else(|p| p.into_inner());
        let recovered = st.status != ChannelStatus::Connected && st.ever_connected;
        st.status = ChannelStatus::Connected;
        st.last_pong = Some(Instant::now());
        st.consecutive_failures = 0;
        st.service_summary = pong.services;
        st.ever_connected = true;
        recovered
    }

    /// Last service summary mapped back to model names.
    pub fn list_models(&self) -> ModelList {
        let st = self.channel_state();
        let mut by_service: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (model, service) in &self.routes {
            by_service.entry(service.as_str()).or_default().push(model);
        }
        let mut models = Vec::new();
        for ServiceSummary { service, ready, desired } in &st.service_summary {
            let mut names = by_service.get(service.as_str()).cloned().unwrap_or_default();
            if names.is_empty() {
                names.push(service.as_str());
            }
            names.sort_unstable();
            for id in names {
                models.push(ModelEntry {
                    id: id.to_owned(),
                    service: service.to_string(),
                    ready: *ready,
                    desired: *desired,
                });
            }
        }
        let age = st.last_pong.map(|t| t.elapsed().as_secs_f64());
        ModelList {
            models,
            status: st.status,
            stale: age.is_none_or(|a| a >= 2.0 * self.timing.ping_interval.as_secs_f64()),
            last_pong_age_s: age,
        }
    }

    /// One keep-alive round trip.
    pub async fn ping(&self) -> Result<Pong, ChannelError> {
        let attempt = async {
            let mut reader = self.channel.invoke("PING".into(), Bytes::new()).await?;
            let mut out = Vec::new();
            let mut buf = [0u8; 4096];
            loop {
                let n = reader
                    .read(&mut buf)
                    .await
                    .map_err(|e| ChannelError::Broken(e.to_string()))?;
                if n == 0 {
                    break;
                }
                out.extend_from_slice(&buf[..n]);
                if out.len() > MAX_PONG_BYTES {
                    return Err(ChannelError::Broken("pong too large".into()));
                }
                if out.ends_with(b"END\n") {
                    if let Ok(p) = Pong::parse(&out) {
                        return Ok(p);
                    }
                }
            }
            if out.is_empty() {
                return Err(ChannelError::Unavailable("no reply".into()));
            }
            Pong::parse(&out).map_err(|e| ChannelError::Broken(e.to_string()))
        };
        tokio::time::timeout(self.timing.ping_timeout, attempt)
            .await
            .unwrap_or_else(|_| Err(ChannelError::Unavailable("ping timed out".into())))
    }

    /// Pings every interval while connected; after a failure retries with
    /// backoff doubling up to the cap until a pong comes back.
    pub async fn keepalive(self: Arc<Self>) {
        let mut backoff = self.timing.backoff_initial;
        loop {
            self.metrics.pings_total.fetch_add(1, Ordering::Relaxed);
            match self.ping().await {
                Ok(pong) => {
                    if self.record_pong(pong) {
                        self.metrics.reconnects_total.fetch_add(1, Ordering::Relaxed);
                        tracing::info!("channel reconnected");
                    }
                    backoff = self.timing.backoff_initial;
                    tokio::select! {
                        _ = tokio::time::sleep(self.timing.ping_interval) => {}
                        _ = self.wake.notified() => {}
                    }
                }
                Err(e) => {
                    self.metrics.pings_failed.fetch_add(1, Ordering::Relaxed);
                    {
                        let mut st = self.state.lock().unwrap_or_else(|p| p.into_inner());
                        st.consecutive_failures += 1;
                        st.status = if st.status == ChannelStatus::Connected {
                            ChannelStatus::Reconnecting
                        } else {
                            ChannelStatus::Down
                        };
                        tracing::warn!(error = %e, failures = st.consecutive_failures, "keep-alive failed");
                    }
                    tokio::time::sleep(backoff).await;
                    backoff = (backoff * 2).min(self.timing.backoff_max);
                    let mut st = self.state.lock().unwrap_or_else(|p| p.into_inner());
                    if st.status == ChannelStatus::Down {
                        st.status = ChannelStatus::Reconnecting;
                    }
                }
            }
        }
    }

    pub fn spawn_keepalive(self: &Arc<Self>) -> tokio::task::JoinHandle<()> {
        tokio::spawn(self.clone().keepalive())
    }

    fn authorize(&self, headers: &HeaderMap) -> Result<String, Failure> {
        let presented = bearer(headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()));
        let Some((id, limit)) = presented.and_then(|k| self.keys.check(k)) else {
            return Err((StatusCode::UNAUTHORIZED, "invalid api key".into()));
        };
        if !self.limiter.allow(id, limit, Instant::now()) {
            return Err((StatusCode::TOO_MANY_REQUESTS, "rate limit exceeded".into()));
        }
        Ok(id.to_owned())
    }

    fn log_access(&self, key_id: &str, model: &str, status: u16) {
        let now = crate::clock::now_ms();
        match &self.access_log {
            Some(f) => {
                let line = format!("{now} {key_id} {model} {status}\n");
                let mut f = f.lock().unwrap_or_else(|p| p.into_inner());
                if let Err(e) = f.write_all(line.as_bytes()) {
                    tracing::warn!(error = %e, "access log write failed");
                }
            }
            None => tracing::info!(key_id, model, status, "request"),
        }
    }

    fn ensure_connected(&self) -> Result<(), Failure> {
        match self.status() {
            ChannelStatus::Connected => Ok(()),
            _ => Err((StatusCode::SERVICE_UNAVAILABLE, "channel down".into())),
        }
    }

    /// Sends one request over the channel and translates the framed reply.
    async fn dispatch(self: &Arc<Self>, req: WireRequest, body: Bytes) -> Result<Response, Failure> {
        let command = encode_request(&req).map_err(|e| (StatusCode::BAD_REQUEST, e.to_string()))?;
        self.metrics.count_service(req.service.as_str());
        let mut reader = match self.channel.invoke(command, body).await {
            Ok(r) => r,
            Err(e) => {
                self.channel_failed();
                return Err((StatusCode::SERVICE_UNAVAILABLE, e.to_string()));
            }
        };
        self.metrics.in_flight.fetch_add(1, Ordering::Relaxed);
        let guard = InFlight(self.clone());

        let mut decoder = FrameDecoder::new();
        let mut buf = vec![0u8; READ_BUF];
        let mut received = 0usize;
        let mut status = None;
        let mut content_type = None;
        loop {
            match decoder.next_event() {
                Ok(Some(FrameEvent::Status(s))) => status = Some(s),
                Ok(Some(FrameEvent::Header(name, value))) if name == "content-type" => content_type = Some(value),
                Ok(Some(FrameEvent::Header(..))) => {}
                Ok(Some(FrameEvent::BodyStart)) => break,
                Ok(Some(FrameEvent::Error(e))) => {
                    return Err((StatusCode::BAD_GATEWAY, format!("upstream error {}: {}", e.code, e.reason)));
                }
                Ok(Some(_)) => return Err((StatusCode::BAD_GATEWAY, "unexpected frame".into())),
                Ok(None) => {
                    let n = reader.read(&mut buf).await.unwrap_or(0);
                    if n == 0 {
                        // Cut before any reply: the link itself is suspect.
                        // Never retried, the body may already have been
                        // delivered.
                        if received == 0 {
                            self.channel_failed();
                        }
                        return Err((StatusCode::BAD_GATEWAY, "channel reply truncated".into()));
                    }
                    received += n;
                    decoder.feed(&buf[..n]);
                }
                Err(e) => return Err((StatusCode::BAD_GATEWAY, e.to_string())),
            }
        }
        let status = status
            .and_then(|s| StatusCode::from_u16(s).ok())
            .unwrap_or(StatusCode::BAD_GATEWAY);

        let chunks = futures::stream::unfold(
            Some((reader, decoder, buf, guard)),
            |state| async move {
                let (mut reader, mut decoder, mut buf, guard) = state?;
                loop {
                    match decoder.next_event() {
                        Ok(Some(FrameEvent::Chunk(b))) => {
                            return Some((Ok::<Bytes, std::io::Error>(b), Some((reader, decoder, buf, guard))));
                        }
                        Ok(Some(FrameEvent::End)) => return None,
                        Ok(Some(_)) | Err(_) => {
                            guard.0.metrics.requests_failed.fetch_add(1, Ordering::Relaxed);
                            return Some((Err(std::io::Error::other("bad frame")), None));
                        }
                        Ok(None) => {
                            let n = reader.read(&mut buf).await.unwrap_or(0);
                            if n == 0 {
                                guard.0.metrics.requests_failed.fetch_add(1, Ordering::Relaxed);
                                return Some((Err(std::io::Error::other("channel reply truncated")), None));
                            }
                            decoder.feed(&buf[..n]);
                        }
                    }
                }
            },
        );
        let mut response = Response::builder().status(status);
        if let Some(ct) = content_type {
            response = response.header(header::CONTENT_TYPE, ct);
        }
        response
            .body(Body::from_stream(chunks))
            .map_err(|e| (StatusCode::BAD_GATEWAY, e.to_string()))
    }

    async fn complete(self: Arc<Self>, path: ApiPath, headers: HeaderMap, body: Bytes) -> Response {
        self.metrics.requests_total.fetch_add(1, Ordering::Relaxed);
        let key_id = match self.authorize(&headers) {
            Ok(id) => id,
            Err(f) => return self.fail("-", "-", f),
        };
        let probe: CompletionProbe = match serde_json::from_slice(&body) {
            Ok(p) => p,
            Err(_) => return self.fail(&key_id, "-", (StatusCode::BAD_REQUEST, "body is not a JSON object".into())),
        };
        let Some(model) = probe.model else {
            return self.fail(&key_id, "-", (StatusCode::BAD_REQUEST, "missing model".into()));
        };
        let Some(service) = self.routes.get(model.as_ref()).cloned() else {
            return self.fail(&key_id, "-", (StatusCode::NOT_FOUND, "unknown model".into()));
        };
        if let Err(f) = self.ensure_connected() {
            return self.fail(&key_id, &model, f);
        }
        let req = WireRequest::new(
            Method::Post,
            service,
            path,
            body.len() as u64,
            probe.stream.unwrap_or(false),
        );
        let model = model.into_owned();
        match self.dispatch(req, body).await {
            Ok(resp) => {
                if !resp.status().is_success() {
                    self.metrics.requests_failed.fetch_add(1, Ordering::Relaxed);
                }
                self.log_access(&key_id, &model, resp.status().as_u16());
                resp
            }
            Err(f) => self.fail(&key_id, &model, f),
        }
    }

    fn fail(&self, key_id: &str, model: &str, failure: Failure) -> Response {
        self.metrics.requests_failed.fetch_add(1, Ordering::Relaxed);
        self.log_access(key_id, model, failure.0.as_u16());
        error_response(failure)
    }

    async fn models(self: Arc<Self>, headers: HeaderMap) -> Response {
        self.metrics.requests_total.fetch_add(1, Ordering::Relaxed);
        let key_id = match self.authorize(&headers) {
            Ok(id) => id,
            Err(f) => return self.fail("-", "-", f),
        };
        let list = self.list_models();
        let body = json!({
            "object": "list",
            "data": list.models.iter().map(|m| json!({
                "id": m.id,
                "object": "model",
                "service": m.service,
                "ready": m.ready,
                "desired": m.desired,
            })).collect::<Vec<_>>(),
            "channel": list.status,
            "last_pong_age_s": list.last_pong_age_s,
            "stale": list.stale,
        });
        self.log_access(&key_id, "-", 200);
        (StatusCode::OK, [(header::CONTENT_TYPE, "application/json")], body.to_string()).into_response()
    }

    /// `/health` answers locally; `?deep=channel` adds a channel round
    /// trip and `?model=<m>` a health probe of one instance of `m`.
    async fn health(self: Arc<Self>, headers: HeaderMap, query: HashMap<String, String>) -> Response {
        let deep = query.get("deep").map(String::as_str);
        let model = query.get("model");
        if deep.is_none() && model.is_none() {
            return (StatusCode::OK, "ok\n").into_response();
        }
        if let Err(f) = self.authorize(&headers) {
            return error_response(f);
        }
        if let Err(f) = self.ensure_connected() {
            return error_response(f);
        }
        if let Some(model) = model {
            let Some(service) = self.routes.get(model).cloned() else {
                return error_response((StatusCode::NOT_FOUND, "unknown model".into()));
            };
            let req = WireRequest::new(Method::Get, service, ApiPath::Health, 0, false);
            return match self.dispatch(req, Bytes::new()).await {
                Ok(resp) => resp,
                Err(f) => error_response(f),
            };
        }
        if deep != Some("channel") {
            return error_response((StatusCode::BAD_REQUEST, "unknown deep check".into()));
        }
        match self.ping().await {
            Ok(pong) => {
                let body = pong.encode();
                (StatusCode::OK, [(header::CONTENT_TYPE, "text/plain")], body).into_response()
            }
            Err(e) => {
                self.channel_failed();
                error_response((StatusCode::SERVICE_UNAVAILABLE, e.to_string()))
            }
        }
    }

    pub fn ingress_router(self: &Arc<Self>) -> Router {
        let chat = self.clone();
        let comp = self.clone();
        let models = self.clone();
        let health = self.clone();
        Router::new()
            .route(
                "/v1/chat/completions",
                post(move |headers: HeaderMap, body: Bytes| chat.clone().complete(ApiPath::ChatCompletions, headers, body)),
            )
            .route(
                "/v1/completions",
                post(move |headers: HeaderMap, body: Bytes| comp.clone().complete(ApiPath::Completions, headers, body)),
            )
            .route("/v1/models", get(move |headers: HeaderMap| models.clone().models(headers)))
            .route(
                "/health",
                get(move |headers: HeaderMap, Query(q): Query<HashMap<String, String>>| {
                    health.clone().health(headers, q)
                }),
            )
            .layer(DefaultBodyLimit::max(MAX_BODY_BYTES as usize))
    }

    pub fn operator_router(self: &Arc<Self>) -> Router {
        Router::new()
            .route("/metrics", get(metrics_handler))
            .route("/status", get(status_handler))
            .with_state(self.clone())
    }
}

async fn metrics_handler(State(p): State<Arc<Proxy>>) -> Response {
    let text = p.metrics.render(p.status(), p.last_pong_age());
    (StatusCode::OK, [(header::CONTENT_TYPE, "text/plain; version=0.0.4")], text).into_response()
}

async fn status_handler(State(p): State<Arc<Proxy>>) -> Response {
    let st = p.channel_state();
    let body = json!({
        "status": p.status(),
        "last_pong_age_s": st.last_pong.map(|t| t.elapsed().as_secs_f64()),
        "consecutive_failures": st.consecutive_failures,
        "services": st.service_summary.iter().map(|s| json!({
            "service": s.service.as_str(),
            "ready": s.ready,
            "desired": s.desired,
        })).collect::<Vec<_>>(),
    });
    (StatusCode::OK, [(header::CONTENT_TYPE, "application/json")], body.to_string()).into_response()
}

/// Serves `router` on `listener` with Nagle disabled on every connection.
pub async fn serve(listener: TcpListener, router: Router) -> std::io::Result<()> {
    let listener = listener.tap_io(|tcp| {
        let _ = tcp.set_nodelay(true);
    });
    axum::serve(listener, router).await
}
