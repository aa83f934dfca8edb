use std::future::Future;
use std::pin::Pin;
use std::time::Duration;

use bytes::Bytes;
use futures::stream::{BoxStream, StreamExt};
use http_body_util::{BodyStream, Full};
use hyper::header::{CONTENT_LENGTH, CONTENT_TYPE, HOST};
use hyper_util::rt::TokioIo;
use thiserror::Error;
use tokio::net::TcpStream;

use crate::resolve::NodeResolver;
use crate::wire::{ApiPath, Method};

pub const CONNECT_TIMEOUT: Duration = Duration::from_secs(3);

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum UpstreamError {
    /// Nothing reached the instance; safe to try another one.
    #[error("connect to {0} failed: {1}")]
    Connect(String, String),
    #[error("upstream request failed: {0}")]
    Request(String),
}

/// One request to a model instance.
#[derive(Debug, Clone)]
pub struct UpstreamRequest {
    pub node: String,
    pub port: u16,
    pub method: Method,
    pub path: ApiPath,
    pub body: Bytes,
}

pub struct UpstreamReply {
    pub status: u16,
    pub content_type: Option<String>,
    pub body: BoxStream<'static, Result<Bytes, String>>,
}

pub type UpstreamFuture<'a> = Pin<Box<dyn Future<Output = Result<UpstreamReply, UpstreamError>> + Send + 'a>>;

/// How the interface reaches model instances.
pub trait Upstream: Send + Sync {
    fn send(&self, req: UpstreamRequest) -> UpstreamFuture<'_>;
}

/// Plain HTTP/1.1, one connection per request.
#[derive(Debug, Clone)]
pub struct HttpUpstream {
    pub resolver: NodeResolver,
    pub connect_timeout: Duration,
}

impl HttpUpstream {
    pub fn new(resolver: NodeResolver) -> Self {
        HttpUpstream {
            resolver,
            connect_timeout: CONNECT_TIMEOUT,
        }
    }

    async fn forward(&self, req: UpstreamRequest) -> Result<UpstreamReply, UpstreamError> {
        let host = self.resolver.host(&req.node).to_owned();
        let target = format!("{host}:{}", req.port);
        let connect_err = |e: String| UpstreamError::Connect(target.clone(), e);
        let stream = tokio::time::timeout(self.connect_timeout, TcpStream::connect((host.as_str(), req.port)))
            .await
            .map_err(|_| connect_err("timed out".into()))?
            .map_err(|e| connect_err(e.to_string()))?;
        let _ = stream.set_nodelay(true);
        let (mut sender, conn) = hyper::client::conn::http1::handshake(TokioIo::new(stream))
            .await
            .map_err(|e| connect_err(e.to_string()))?;
        tokio::spawn(async move {
            if let Err(e) = conn.await {
                tracing::debug!(error = %e, "upstream connection closed with error");
            }
        });

        let mut builder = hyper::Request::builder()
            .method(req.method.as_str())
            .uri(req.path.as_str())
            .header(HOST, &target);
        if req.method == Method::Post {
            builder = builder
                .header(CONTENT_TYPE, "application/json")
                .header(CONTENT_LENGTH, req.body.len());
        }
        let request = builder
            .body(Full::new(req.body))
            .map_err(|e| UpstreamError::Request(e.to_string()))?;
        let response = sender
            .send_request(request)
            .await
            .map_err(|e| UpstreamError::Request(e.to_string()))?;
        let status = response.status().as_u16();
        let content_type = response
            .headers()
            .get(CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .map(str::to_owned);
        let body = BodyStream::new(response.into_body())
            .filter_map(|frame| async move {
                match frame {
                    Ok(f) => f.into_data().ok().map(Ok),
                    Err(e) => Some(Err(e.to_string())),
                }
            })
            .boxed();
        Ok(UpstreamReply {
            status,
            content_type,
            body,
        })
    }
}

impl Upstream for HttpUpstream {
    fn send(&self, req: UpstreamRequest) -> UpstreamFuture<'_> {
        Box::pin(self.forward(req))
    }
}
