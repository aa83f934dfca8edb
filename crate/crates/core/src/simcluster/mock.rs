//! Mock OpenAI-style model server with a health endpoint gated on
//! readiness, scripted token output, a concurrency limit with a bounded
//! queue, and optional reply pacing.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::extract::State;
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use bytes::Bytes;
use serde::{Deserialize, Serialize};
use serde_json::json;
use axum::serve::ListenerExt;
use tokio::net::TcpListener;
use tokio::sync::{watch, OwnedSemaphorePermit, Semaphore};
use tokio::time::Instant;

/// Scripted output; token `i` is `MOCK_TOKENS[i % len]`.
pub const MOCK_TOKENS: [&str; 8] = ["The", " quick", " brown", " fox", " jumps", " over", " the", " dog."];

const QUEUE_FACTOR: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockProfile {
    #[serde(default)]
    pub first_token_delay_ms: u64,
    /// Zero emits all tokens at once.
    #[serde(default)]
    pub tokens_per_second: f64,
    #[serde(default = "MockProfile::default_tokens")]
    pub tokens_per_reply: u32,
    #[serde(default = "MockProfile::default_concurrency")]
    pub max_concurrent: u32,
    /// Caps replies started per second across all requests.
    #[serde(default)]
    pub replies_per_second: Option<f64>,
}

impl MockProfile {
    fn default_tokens() -> u32 {
        16
    }
    fn default_concurrency() -> u32 {
        64
    }

    /// Answers instantly.
    pub fn null() -> Self {
        MockProfile {
            first_token_delay_ms: 0,
            tokens_per_second: 0.0,
            tokens_per_reply: 4,
            max_concurrent: 1024,
            replies_per_second: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.tokens_per_second.is_finite() && self.tokens_per_second >= 0.0) {
            return Err("tokens_per_second must be a non-negative number".into());
        }
        if self.tokens_per_reply == 0 {
            return Err("tokens_per_reply must be at least 1".into());
        }
        if self.max_concurrent == 0 {
            return Err("max_concurrent must be at least 1".into());
        }
        if let Some(r) = self.replies_per_second {
            if !(r.is_finite() && r > 0.0) {
                return Err("replies_per_second must be positive".into());
            }
        }
        Ok(())
    }

    fn token_gap(&self) -> Duration {
        if self.tokens_per_second > 0.0 {
            Duration::from_secs_f64(1.0 / self.tokens_per_second)
        } else {
            Duration::ZERO
        }
    }

    /// The full scripted reply text.
    pub fn reply_text(&self) -> String {
        (0..self.tokens_per_reply as usize)
            .map(|i| MOCK_TOKENS[i % MOCK_TOKENS.len()])
            .collect()
    }
}

impl Default for MockProfile {
    fn default() -> Self {
        MockProfile {
            first_token_delay_ms: 27,
            tokens_per_second: 50.0,
            tokens_per_reply: Self::default_tokens(),
            max_concurrent: Self::default_concurrency(),
            replies_per_second: None,
        }
    }
}

#[derive(Debug, Default)]
pub struct MockStats {
    pub completions: AtomicU64,
    pub rejected: AtomicU64,
    pub health_checks: AtomicU64,
}

struct MockState {
    model: String,
    profile: MockProfile,
    ready: Arc<AtomicBool>,
    stats: Arc<MockStats>,
    slots: Arc<Semaphore>,
    waiting: AtomicUsize,
    next_reply: tokio::sync::Mutex<Instant>,
}

pub struct MockServer {
    addr: SocketAddr,
    ready: Arc<AtomicBool>,
    stats: Arc<MockStats>,
    shutdown: watch::Sender<bool>,
    task: Option<tokio::task::JoinHandle<()>>,
}

impl MockServer {
    pub async fn start(
        addr: SocketAddr,
        model: &str,
        profile: MockProfile,
        probe_path: &str,
        ready: bool,
    ) -> std::io::Result<MockServer> {
        let listener = TcpListener::bind(addr).await?;
        Self::from_listener(listener, model, profile, probe_path, ready)
    }

    pub fn from_listener(
        listener: TcpListener,
        model: &str,
        profile: MockProfile,
        probe_path: &str,
        ready: bool,
    ) -> std::io::Result<MockServer> {
        let addr = listener.local_addr()?;
        let ready = Arc::new(AtomicBool::new(ready));
        let stats = Arc::new(MockStats::default());
        let state = Arc::new(MockState {
            model: model.to_owned(),
            slots: Arc::new(Semaphore::new(profile.max_concurrent as usize)),
            profile,
            ready: ready.clone(),
            stats: stats.clone(),
            waiting: AtomicUsize::new(0),
            next_reply: tokio::sync::Mutex::new(Instant::now()),
        });
        let mut app = Router::new()
            .route("/v1/models", get(models))
            .route("/v1/chat/completions", post(complete))
            .route("/v1/completions", post(complete));
        if probe_path != "/v1/models" {
            app = app.route(probe_path, get(health));
        }
        let app = app.with_state(state);
        let (shutdown, mut rx) = watch::channel(false);
        let task = tokio::spawn(async move {
            let stop = async move {
                let _ = rx.wait_for(|v| *v).await;
            };
            let listener = listener.tap_io(|tcp| {
                let _ = tcp.set_nodelay(true);
            });
            if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(stop).await {
                tracing::warn!(error = %e, "mock server stopped");
            }
        });
        Ok(MockServer {
            addr,
            ready,
            stats,
            shutdown,
            task: Some(task),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn set_ready(&self, ready: bool) {
        self.ready.store(ready, Ordering::SeqCst);
    }

    pub fn stats(&self) -> &MockStats {
        &self.stats
    }

    /// Stops accepting and lets in-flight replies finish.
    pub async fn stop(mut self) {
        let _ = self.shutdown.send(true);
        if let Some(task) = self.task.take() {
            let _ = tokio::time::timeout(Duration::from_secs(5), task).await;
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        let _ = self.shutdown.send(true);
    }
}

/// Starts a ready mock server for `model` on `127.0.0.1:port`.
pub async fn mock_model_serve(port: u16, model: &str, profile: MockProfile) -> std::io::Result<MockServer> {
    MockServer::start(SocketAddr::from(([127, 0, 0, 1], port)), model, profile, "/health", true).await
}

async fn health(State(st): State<Arc<MockState>>) -> StatusCode {
    st.stats.health_checks.fetch_add(1, Ordering::Relaxed);
    if st.ready.load(Ordering::SeqCst) {
        StatusCode::OK
    } else {
        StatusCode::SERVICE_UNAVAILABLE
    }
}

async fn models(State(st): State<Arc<MockState>>) -> Response {
    let body = json!({
        "object": "list",
        "data": [{"id": st.model, "object": "model", "owned_by": "mock"}],
    });
    json_response(StatusCode::OK, body.to_string())
}

fn json_response(status: StatusCode, body: String) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

async fn complete(State(st): State<Arc<MockState>>, uri: Uri, body: Bytes) -> Response {
    if !st.ready.load(Ordering::SeqCst) {
        return StatusCode::SERVICE_UNAVAILABLE.into_response();
    }
    let permit = match st.slots.clone().try_acquire_owned() {
        Ok(p) => p,
        Err(_) => {
            let queued = st.waiting.fetch_add(1, Ordering::SeqCst) + 1;
            if queued > QUEUE_FACTOR * st.profile.max_concurrent as usize {
                st.waiting.fetch_sub(1, Ordering::SeqCst);
                st.stats.rejected.fetch_add(1, Ordering::Relaxed);
                return json_response(
                    StatusCode::TOO_MANY_REQUESTS,
                    json!({"error": {"message": "queue full"}}).to_string(),
                );
            }
            let p = st.slots.clone().acquire_owned().await;
            st.waiting.fetch_sub(1, Ordering::SeqCst);
            match p {
                Ok(p) => p,
                Err(_) => return StatusCode::SERVICE_UNAVAILABLE.into_response(),
            }
        }
    };
    if let Some(rate) = st.profile.replies_per_second {
        let slot = {
            let mut next = st.next_reply.lock().await;
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + Duration::from_secs_f64(1.0 / rate);
            slot
        };
        tokio::time::sleep_until(slot).await;
    }
    st.stats.completions.fetch_add(1, Ordering::Relaxed);

    let request: serde_json::Value = serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null);
    let stream = request.get("stream").and_then(|v| v.as_bool()).unwrap_or(false);
    let chat = uri.path() == "/v1/chat/completions";
    if stream {
        stream_reply(st, permit, chat)
    } else {
        let p = &st.profile;
        let total = Duration::from_millis(p.first_token_delay_ms)
            + p.token_gap() * p.tokens_per_reply.saturating_sub(1);
        if !total.is_zero() {
            tokio::time::sleep(total).await;
        }
        drop(permit);
        json_response(StatusCode::OK, full_reply(&st.model, &p.reply_text(), chat))
    }
}

fn full_reply(model: &str, text: &str, chat: bool) -> String {
    let choice = if chat {
        json!({"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"})
    } else {
        json!({"index": 0, "text": text, "finish_reason": "stop"})
    };
    json!({
        "id": "mock-0",
        "object": if chat { "chat.completion" } else { "text_completion" },
        "model": model,
        "choices": [choice],
    })
    .to_string()
}

fn chunk_event(model: &str, token: &str, chat: bool) -> Bytes {
    let choice = if chat {
        json!({"index": 0, "delta": {"content": token}})
    } else {
        json!({"index": 0, "text": token})
    };
    let event = json!({
        "id": "mock-0",
        "object": if chat { "chat.completion.chunk" } else { "text_completion" },
        "model": model,
        "choices": [choice],
    });
    Bytes::from(format!("data: {event}\n\n"))
}

fn stream_reply(st: Arc<MockState>, permit: OwnedSemaphorePermit, chat: bool) -> Response {
    let n = st.profile.tokens_per_reply as usize;
    let first = Duration::from_millis(st.profile.first_token_delay_ms);
    let gap = st.profile.token_gap();
    let events = futures::stream::unfold((0usize, Some(permit)), move |(i, permit)| {
        let st = st.clone();
        async move {
            let permit = permit?;
            if i > n {
                return None;
            }
            if i == n {
                drop(permit);
                return Some((Ok::<_, std::convert::Infallible>(Bytes::from_static(b"data: [DONE]\n\n")), (i + 1, None)));
            }
            let wait = if i == 0 { first } else { gap };
            if !wait.is_zero() {
                tokio::time::sleep(wait).await;
            }
            let token = MOCK_TOKENS[i % MOCK_TOKENS.len()];
            Some((Ok(chunk_event(&st.model, token, chat)), (i + 1, Some(permit))))
        }
    });
    Response::builder()
        .status(StatusCode::OK)
        .header(header::CONTENT_TYPE, "text/event-stream")
        .header(header::CACHE_CONTROL, "no-cache")
        .body(Body::from_stream(events))
        .expect("static response parts")
}
