use std::io::{Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use crate::resolve::NodeResolver;

pub const PROBE_TIMEOUT: Duration = Duration::from_secs(2);

/// Health check against a placed instance. Any failure (refused, timeout,
/// non-200) reads as not ready.
pub trait Prober: Sync {
    fn probe(&self, node: &str, port: u16, path: &str) -> bool;
}

/// Blocking `GET <path>` over plain HTTP/1.1.
#[derive(Debug, Clone)]
pub struct HttpProber {
    pub resolver: NodeResolver,
    pub timeout: Duration,
}

impl HttpProber {
    pub fn new(resolver: NodeResolver) -> Self {
        HttpProber {
            resolver,
            timeout: PROBE_TIMEOUT,
        }
    }
}

impl Prober for HttpProber {
    fn probe(&self, node: &str, port: u16, path: &str) -> bool {
        let host = self.resolver.host(node);
        http_status(host, port, path, self.timeout) == Some(200)
    }
}

pub fn http_status(host: &str, port: u16, path: &str, timeout: Duration) -> Option<u16> {
    let deadline = Instant::now() + timeout;
    let addr = (host, port).to_socket_addrs().ok()?.next()?;
    let mut stream = TcpStream::connect_timeout(&addr, timeout).ok()?;
    let remaining = deadline.checked_duration_since(Instant::now())?;
    stream.set_read_timeout(Some(remaining)).ok()?;
    stream.set_write_timeout(Some(remaining)).ok()?;
    let request = format!("GET {path} HTTP/1.1\r\nHost: {host}:{port}\r\nConnection: close\r\n\r\n");
    stream.write_all(request.as_bytes()).ok()?;
    let mut head = [0u8; 32];
    let mut filled = 0;
    while filled < 12 {
        let n = stream.read(&mut head[filled..]).ok()?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    let line = std::str::from_utf8(&head[..filled]).ok()?;
    let mut parts = line.split(' ');
    match parts.next() {
        Some(v) if v.starts_with("HTTP/1.") => parts.next()?.parse().ok(),
        _ => None,
    }
}
