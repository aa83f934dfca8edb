use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::Ordering;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use bytes::Bytes;
use futures::future::BoxFuture;
use hpcgate::bench::{completion_body, HttpClient};
use hpcgate::interface::{HttpUpstream, Interface, NoTrigger};
use hpcgate::proxy::{
    ApiKey, Channel, ChannelError, ChannelReader, ChannelStatus, LinkMode, LocalChannel, Proxy, ProxySettings,
    RouteBinding,
};
use hpcgate::resolve::NodeResolver;
use hpcgate::routing::{RouteEntry, RouteState, RoutingTable};
use hpcgate::scheduler::{DesiredState, SchedulerPaths, ServiceDesired};
use hpcgate::simcluster::{MockProfile, MockServer};
use hpcgate::wire::ServiceName;
use tokio::net::TcpListener;
use tokio::time::Instant;

/// Records every invocation's command line and start time.
struct Recording {
    inner: Arc<LocalChannel>,
    calls: Mutex<Vec<(String, Instant)>>,
    bodies: Mutex<Vec<Bytes>>,
}

impl Recording {
    fn count(&self, prefix: &str) -> usize {
        self.calls.lock().unwrap().iter().filter(|(c, _)| c.starts_with(prefix)).count()
    }

    fn ping_times(&self) -> Vec<Instant> {
        self.calls.lock().unwrap().iter().filter(|(c, _)| c == "PING").map(|(_, t)| *t).collect()
    }
}

impl Channel for Recording {
    fn invoke(&self, command: String, body: Bytes) -> BoxFuture<'static, Result<ChannelReader, ChannelError>> {
        self.calls.lock().unwrap().push((command.clone(), Instant::now()));
        self.bodies.lock().unwrap().push(body.clone());
        self.inner.invoke(command, body)
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    channel: Arc<Recording>,
    proxy: Arc<Proxy>,
}

fn entry(job: &str, service: &str, port: u16) -> RouteEntry {
    RouteEntry {
        job_id: job.into(),
        service: ServiceName::new(service).unwrap(),
        node: "gpu01".into(),
        port,
        state: RouteState::Ready,
        updated_at: 0,
    }
}

fn settings() -> ProxySettings {
    ProxySettings {
        routes: vec![
            RouteBinding { model: "qwen2-72b".into(), service: "qwen2-72b".into() },
            RouteBinding { model: "llama3-8b".into(), service: "llama3-8b".into() },
        ],
        api_keys: vec![ApiKey { id: "alice".into(), key: "sk-alice".into(), rate_limit_per_minute: Some(1000) }],
        ..ProxySettings::default()
    }
}

fn fixture(entries: Vec<RouteEntry>, settings: ProxySettings) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let paths = SchedulerPaths::in_dir(dir.path());
    RoutingTable { entries }.store(&paths.table).unwrap();
    let mut desired = DesiredState::default();
    desired.services.insert("qwen2-72b".into(), ServiceDesired { desired: 2, avg_concurrency: 0.0 });
    desired.services.insert("llama3-8b".into(), ServiceDesired { desired: 1, avg_concurrency: 0.0 });
    desired.store(&paths.desired).unwrap();
    let iface = Interface::new(paths, Arc::new(HttpUpstream::new(NodeResolver::loopback())), Arc::new(NoTrigger));
    let channel = Arc::new(Recording {
        inner: Arc::new(LocalChannel::new(Arc::new(iface.with_seed(3)))),
        calls: Mutex::new(Vec::new()),
        bodies: Mutex::new(Vec::new()),
    });
    let proxy = Proxy::new(&settings, channel.clone()).unwrap();
    Fixture { _dir: dir, channel, proxy }
}

async fn serve(proxy: &Arc<Proxy>) -> SocketAddr {
    let l = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = l.local_addr().unwrap();
    let router = proxy.ingress_router();
    tokio::spawn(hpcgate::proxy::serve(l, router));
    addr
}

/// Instance ports must lie in the routing table's range.
async fn mock(profile: MockProfile) -> MockServer {
    for port in (23_000..40_000).step_by(97) {
        if let Ok(l) = TcpListener::bind(("127.0.0.1", port)).await {
            return MockServer::from_listener(l, "qwen2-72b", profile, "/health", true).unwrap();
        }
    }
    panic!("no free port");
}

#[tokio::test]
async fn list_models_before_and_after_pong() {
    let f = fixture(
        vec![entry("1", "qwen2-72b", 20001), entry("2", "qwen2-72b", 20002), entry("3", "llama3-8b", 20003)],
        settings(),
    );
    let list = f.proxy.list_models();
    assert!(list.models.is_empty());
    assert!(list.stale);
    assert_eq!(f.proxy.status(), ChannelStatus::Down);

    f.proxy.clone().spawn_keepalive();
    while f.proxy.status() != ChannelStatus::Connected {
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    let got: BTreeMap<String, (u32, u32)> = f
        .proxy
        .list_models()
        .models
        .into_iter()
        .map(|m| (m.id, (m.ready, m.desired)))
        .collect();
    let want = BTreeMap::from([("qwen2-72b".to_owned(), (2, 2)), ("llama3-8b".to_owned(), (1, 1))]);
    assert_eq!(got, want);
    assert!(!f.proxy.list_models().stale);
}

#[tokio::test]
async fn client_errors_never_reach_the_channel() {
    let f = fixture(vec![], settings());
    f.proxy.clone().spawn_keepalive();
    while f.proxy.status() != ChannelStatus::Connected {
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    let before = f.channel.calls.lock().unwrap().len();
    let addr = serve(&f.proxy).await;
    let body = completion_body("qwen2-72b", "hi", false);

    let mut anon = HttpClient::new(addr, None);
    assert_eq!(anon.request("POST", "/v1/chat/completions", Some(body.clone()), false).await.unwrap().status, 401);
    let mut wrong = HttpClient::new(addr, Some("sk-bob"));
    assert_eq!(wrong.request("POST", "/v1/chat/completions", Some(body.clone()), false).await.unwrap().status, 401);
    let mut alice = HttpClient::new(addr, Some("sk-alice"));
    let unknown = completion_body("gpt-9", "hi", false);
    assert_eq!(alice.request("POST", "/v1/completions", Some(unknown), false).await.unwrap().status, 404);
    let garbage = Bytes::from_static(b"not json");
    assert_eq!(alice.request("POST", "/v1/completions", Some(garbage), false).await.unwrap().status, 400);
    assert_eq!(anon.request("GET", "/health", None, false).await.unwrap().status, 200);

    assert_eq!(f.channel.calls.lock().unwrap().len(), before);
    assert_eq!(f.proxy.metrics().requests_total.load(Ordering::Relaxed), 4);
}

#[tokio::test]
async fn rate_limit_is_per_key() {
    let mut s = settings();
    s.api_keys[0].rate_limit_per_minute = Some(2);
    s.api_keys.push(ApiKey { id: "bob".into(), key: "sk-bob".into(), rate_limit_per_minute: Some(2) });
    let f = fixture(vec![], s);
    let addr = serve(&f.proxy).await;
    let mut alice = HttpClient::new(addr, Some("sk-alice"));
    let mut bob = HttpClient::new(addr, Some("sk-bob"));
    for _ in 0..2 {
        assert_eq!(alice.request("GET", "/v1/models", None, false).await.unwrap().status, 200);
    }
    assert_eq!(alice.request("GET", "/v1/models", None, false).await.unwrap().status, 429);
    assert_eq!(bob.request("GET", "/v1/models", None, false).await.unwrap().status, 200);
}

#[tokio::test]
async fn forwards_and_streams_reply() {
    let server = mock(MockProfile { first_token_delay_ms: 0, tokens_per_second: 0.0, ..MockProfile::default() }).await;
    let f = fixture(vec![entry("1", "qwen2-72b", server.addr().port())], settings());
    f.proxy.clone().spawn_keepalive();
    while f.proxy.status() != ChannelStatus::Connected {
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    let addr = serve(&f.proxy).await;
    let mut alice = HttpClient::new(addr, Some("sk-alice"));
    let reply = alice
        .request("POST", "/v1/chat/completions", Some(completion_body("qwen2-72b", "hi", true)), false)
        .await
        .unwrap();
    assert_eq!(reply.status, 200);
    let text = String::from_utf8(reply.body.to_vec()).unwrap();
    let events: Vec<&str> = text.split("\n\n").filter(|e| !e.is_empty()).collect();
    assert_eq!(events.last(), Some(&"data: [DONE]"));
    assert!(events.len() > 2);
    assert_eq!(f.channel.count("REQ 1 POST qwen2-72b /v1/chat/completions"), 1);
    assert_eq!(f.proxy.metrics().service_count("qwen2-72b"), 1);
    assert_eq!(f.proxy.metrics().in_flight.load(Ordering::Relaxed), 0);

    // no ready instance behind a bound model
    let reply = alice
        .request("POST", "/v1/chat/completions", Some(completion_body("llama3-8b", "hi", false)), false)
        .await
        .unwrap();
    assert_eq!(reply.status, 502);
}

#[tokio::test]
async fn severed_channel_fails_fast_and_recovers() {
    let server = mock(MockProfile::null()).await;
    let mut s = settings();
    s.ping_interval_ms = 500;
    s.ping_timeout_ms = 400;
    s.backoff_initial_ms = 100;
    s.backoff_max_ms = 800;
    let f = fixture(vec![entry("1", "qwen2-72b", server.addr().port())], s);
    f.proxy.clone().spawn_keepalive();
    while f.proxy.status() != ChannelStatus::Connected {
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    let addr = serve(&f.proxy).await;
    let mut alice = HttpClient::new(addr, Some("sk-alice"));
    let body = completion_body("qwen2-72b", "hi", false);
    let r = alice.request("POST", "/v1/completions", Some(body.clone()), false).await.unwrap();
    assert_eq!(r.status, 200, "{:?}", r.body);

    f.channel.inner.set_link(LinkMode::Refuse);
    for _ in 0..5 {
        let t = std::time::Instant::now();
        let status = alice.request("POST", "/v1/completions", Some(body.clone()), false).await.unwrap().status;
        assert_eq!(status, 503);
        assert!(t.elapsed() < Duration::from_millis(100), "{:?}", t.elapsed());
    }
    assert_ne!(f.proxy.status(), ChannelStatus::Connected);
    let forwarded = f.channel.count("REQ");

    f.channel.inner.set_link(LinkMode::Up);
    let t = std::time::Instant::now();
    while f.proxy.status() != ChannelStatus::Connected {
        assert!(t.elapsed() < Duration::from_secs(3));
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    assert_eq!(alice.request("POST", "/v1/completions", Some(body), false).await.unwrap().status, 200);
    // the first severed request reached the channel and was refused; none
    // of them was sent again
    assert_eq!(f.channel.count("REQ"), forwarded + 1);
    assert_eq!(f.proxy.metrics().reconnects_total.load(Ordering::Relaxed), 1);
}

/// Interval, timeout and backoff schedule traced in virtual time.
#[tokio::test(start_paused = true)]
async fn keepalive_trace() {
    let f = fixture(vec![], settings());
    let t0 = Instant::now();
    f.proxy.clone().spawn_keepalive();
    let at = |s: f64| t0 + Duration::from_secs_f64(s);

    tokio::time::sleep_until(at(7.0)).await;
    let pings: Vec<f64> = f.channel.ping_times().iter().map(|t| (*t - t0).as_secs_f64()).collect();
    assert_eq!(pings, vec![0.0, 5.0]);
    assert_eq!(f.proxy.channel_state().status, ChannelStatus::Connected);

    // severed at t=7: the ping at t=10 hangs and times out at t=14
    f.channel.inner.set_link(LinkMode::Hang);
    tokio::time::sleep_until(at(13.9)).await;
    assert_eq!(f.proxy.channel_state().status, ChannelStatus::Connected);
    tokio::time::sleep_until(at(14.1)).await;
    assert_eq!(f.proxy.channel_state().status, ChannelStatus::Reconnecting);

    // refusing from now on, so the retries fail instantly: t=15, 17, 21, 29
    f.channel.inner.set_link(LinkMode::Refuse);
    tokio::time::sleep_until(at(30.0)).await;
    let pings: Vec<f64> = f.channel.ping_times().iter().map(|t| (*t - t0).as_secs_f64()).collect();
    assert_eq!(pings, vec![0.0, 5.0, 10.0, 15.0, 17.0, 21.0, 29.0]);

    // restored at t=30; the capped retry at t=37 succeeds
    f.channel.inner.set_link(LinkMode::Up);
    tokio::time::sleep_until(at(36.9)).await;
    assert_ne!(f.proxy.channel_state().status, ChannelStatus::Connected);
    tokio::time::sleep_until(at(37.1)).await;
    assert_eq!(f.proxy.channel_state().status, ChannelStatus::Connected);
    assert_eq!(f.proxy.metrics().reconnects_total.load(Ordering::Relaxed), 1);
    assert_eq!(f.proxy.metrics().pings_failed.load(Ordering::Relaxed), 5);
}

/// Outage of 20 s from the first failed attempt: retries at +1, +3, +7,
/// +15 and +23 s, so the channel is back by +23 s.
#[tokio::test(start_paused = true)]
async fn backoff_schedule_after_outage() {
    let f = fixture(vec![], settings());
    let t0 = Instant::now();
    f.channel.inner.set_link(LinkMode::Refuse);
    f.proxy.clone().spawn_keepalive();
    tokio::time::sleep_until(t0 + Duration::from_secs(20)).await;
    f.channel.inner.set_link(LinkMode::Up);
    tokio::time::sleep_until(t0 + Duration::from_secs(30)).await;
    let pings: Vec<f64> = f.channel.ping_times().iter().map(|t| (*t - t0).as_secs_f64()).collect();
    assert_eq!(pings[..6], [0.0, 1.0, 3.0, 7.0, 15.0, 23.0]);
    assert_eq!(f.proxy.channel_state().status, ChannelStatus::Connected);
    // the first connection is not a reconnect
    assert_eq!(f.proxy.metrics().reconnects_total.load(Ordering::Relaxed), 0);
}

#[tokio::test]
async fn metrics_and_status_endpoints() {
    let f = fixture(vec![], settings());
    let l = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = l.local_addr().unwrap();
    tokio::spawn(hpcgate::proxy::serve(l, f.proxy.operator_router()));
    let mut op = HttpClient::new(addr, None);
    let text = String::from_utf8(op.request("GET", "/metrics", None, false).await.unwrap().body.to_vec()).unwrap();
    assert!(text.lines().any(|l| l == "requests_total 0"), "{text}");
    assert!(text.lines().any(|l| l == "channel_status 0"), "{text}");
    let status: serde_json::Value =
        serde_json::from_slice(&op.request("GET", "/status", None, false).await.unwrap().body).unwrap();
    assert_eq!(status["status"], "down");
    assert!(status["last_pong_age_s"].is_null());
}
