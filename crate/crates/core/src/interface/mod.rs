//! Cluster-side entrypoint, run once per channel invocation.
//!
//! A keep-alive ping triggers a scheduler tick and answers with the
//! service summary. A request is counted in the load log, sent to a random
//! routable instance from the routing table, and its reply streamed back
//! framed. The interface keeps no state between invocations beyond what is
//! in the routing table, desired file and load log.

mod trigger;
mod upstream;

pub use trigger::{NoTrigger, SchedulerTrigger, SpawnTrigger, WorkerTrigger, DEFAULT_MIN_TICK_INTERVAL};
pub use upstream::{
    HttpUpstream, Upstream, UpstreamError, UpstreamFuture, UpstreamReply, UpstreamRequest, CONNECT_TIMEOUT,
};

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use bytes::Bytes;
use futures::StreamExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use crate::clock::now_ms;
use crate::loadlog::{LoadEvent, LoadLog};
use crate::routing::{pick_instance, RouteEntry, RoutingTable};
use crate::scheduler::{DesiredState, SchedulerPaths};
use crate::wire::{
    frame_chunks, frame_error, frame_head, is_forwardable_header, parse_command_bytes, Command, Pong,
    ServiceName, ServiceSummary, WireRequest, FRAME_END,
};

/// How one invocation ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pong,
    Forwarded { status: u16 },
    Rejected { code: u16 },
    /// The reply was cut off after it started.
    Aborted,
}

pub struct Interface {
    paths: SchedulerPaths,
    upstream: Arc<dyn Upstream>,
    trigger: Arc<dyn SchedulerTrigger>,
    rng: Option<Mutex<ChaCha8Rng>>,
}

/// Appends the request-end event however the invocation exits.
struct InFlight {
    log: LoadLog,
    service: String,
}

impl InFlight {
    fn begin(log: LoadLog, service: &str) -> InFlight {
        if let Err(e) = log.append(service, LoadEvent::start(now_ms())) {
            tracing::warn!(service, error = %e, "load event not recorded");
        }
        InFlight {
            log,
            service: service.to_owned(),
        }
    }
}

impl Drop for InFlight {
    fn drop(&mut self) {
        if let Err(e) = self.log.append(&self.service, LoadEvent::end(now_ms())) {
            tracing::warn!(service = %self.service, error = %e, "load event not recorded");
        }
    }
}

impl Interface {
    pub fn new(paths: SchedulerPaths, upstream: Arc<dyn Upstream>, trigger: Arc<dyn SchedulerTrigger>) -> Self {
        Interface {
            paths,
            upstream,
            trigger,
            rng: None,
        }
    }

    /// Seeds instance selection for reproducible runs.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng = Some(Mutex::new(ChaCha8Rng::seed_from_u64(seed)));
        self
    }

    pub fn paths(&self) -> &SchedulerPaths {
        &self.paths
    }

    fn pick<'t>(&self, table: &'t RoutingTable, service: &str) -> Option<&'t RouteEntry> {
        match &self.rng {
            Some(rng) => pick_instance(table, service, &mut *rng.lock().unwrap_or_else(|p| p.into_inner())).ok(),
            None => pick_instance(table, service, &mut rand::rng()).ok(),
        }
    }

    fn pick_other<'t>(&self, table: &'t RoutingTable, service: &str, not: &RouteEntry) -> Option<&'t RouteEntry> {
        let others: Vec<&RouteEntry> = table
            .routable(service)
            .into_iter()
            .filter(|e| e.job_id != not.job_id)
            .collect();
        if others.is_empty() {
            return None;
        }
        let i = match &self.rng {
            Some(rng) => rng.lock().unwrap_or_else(|p| p.into_inner()).random_range(0..others.len()),
            None => rand::rng().random_range(0..others.len()),
        };
        Some(others[i])
    }

    /// Service summary from the routing table and the desired file.
    pub fn pong(&self) -> Pong {
        let table = RoutingTable::load(&self.paths.table).unwrap_or_else(|e| {
            tracing::warn!(error = %e, "routing table unreadable");
            RoutingTable::new()
        });
        let desired = DesiredState::load(&self.paths.desired);
        let mut names: BTreeMap<String, ()> = desired.services.keys().map(|k| (k.clone(), ())).collect();
        for e in &table.entries {
            names.insert(e.service.as_str().to_owned(), ());
        }
        Pong {
            services: names
                .into_keys()
                .filter_map(|name| {
                    Some(ServiceSummary {
                        service: ServiceName::new(&name)?,
                        ready: table.routable(&name).len() as u32,
                        desired: desired.desired(&name),
                    })
                })
                .collect(),
        }
    }

    /// Handles one invocation: `command` is the original command string,
    /// `body` the invocation's input and `out` its output.
    pub async fn handle_invocation<R, W>(&self, command: &[u8], body: &mut R, out: &mut W) -> Outcome
    where
        R: AsyncRead + Unpin,
        W: AsyncWrite + Unpin,
    {
        let outcome = match parse_command_bytes(command) {
            Ok(Command::Ping(_)) => {
                self.trigger.trigger();
                match write_all(out, &self.pong().encode()).await {
                    Ok(()) => Outcome::Pong,
                    Err(_) => Outcome::Aborted,
                }
            }
            Ok(Command::Request(req)) => self.forward(req, body, out).await,
            Err(e) => reject(out, 400, &e.to_string()).await,
        };
        tracing::debug!(?outcome, "invocation done");
        outcome
    }

    async fn forward<R, W>(&self, req: WireRequest, body: &mut R, out: &mut W) -> Outcome
    where
        R: AsyncRead + Unpin,
        W: AsyncWrite + Unpin,
    {
        let service = req.service.as_str();
        let _in_flight = InFlight::begin(LoadLog::new(&self.paths.load_dir), service);

        let mut payload = vec![0u8; req.content_length as usize];
        if body.read_exact(&mut payload).await.is_err() {
            return reject(out, 400, "body shorter than content length").await;
        }
        let payload = Bytes::from(payload);

        let table = match RoutingTable::load(&self.paths.table) {
            Ok(t) => t,
            Err(e) => {
                tracing::warn!(error = %e, "routing table unreadable");
                return reject(out, 502, "routing table unavailable").await;
            }
        };
        let Some(first) = self.pick(&table, service) else {
            return reject(out, 404, "no ready instance").await;
        };
        let request = |e: &RouteEntry| UpstreamRequest {
            node: e.node.clone(),
            port: e.port,
            method: req.method,
            path: req.path,
            body: payload.clone(),
        };
        let reply = match self.upstream.send(request(first)).await {
            Ok(r) => Ok(r),
            Err(UpstreamError::Connect(target, reason)) => {
                tracing::info!(job_id = %first.job_id, %target, %reason, "instance unreachable, retrying");
                match self.pick_other(&table, service, first) {
                    Some(second) => self.upstream.send(request(second)).await,
                    None => Err(UpstreamError::Connect(target, reason)),
                }
            }
            Err(e) => Err(e),
        };
        let mut reply = match reply {
            Ok(r) => r,
            Err(e) => {
                tracing::warn!(service, error = %e, "upstream failed");
                return reject(out, 502, "upstream unreachable").await;
            }
        };

        let headers: Vec<(String, String)> = reply
            .content_type
            .take()
            .filter(|v| v.bytes().all(|b| (0x20..0x7f).contains(&b)))
            .map(|v| ("content-type".to_owned(), v))
            .into_iter()
            .filter(|(k, _)| is_forwardable_header(k))
            .collect();
        let head = match frame_head(reply.status, &headers) {
            Ok(h) => h,
            Err(_) => return reject(out, 502, "bad upstream status").await,
        };
        if write_all(out, &head).await.is_err() {
            return Outcome::Aborted;
        }
        let mut frame = Vec::new();
        while let Some(chunk) = reply.body.next().await {
            let chunk = match chunk {
                Ok(c) => c,
                Err(e) => {
                    tracing::warn!(service, error = %e, "upstream broke mid-reply");
                    return Outcome::Aborted;
                }
            };
            if chunk.is_empty() {
                continue;
            }
            frame.clear();
            frame_chunks(&chunk, &mut frame);
            if write_all(out, &frame).await.is_err() {
                return Outcome::Aborted;
            }
        }
        if write_all(out, FRAME_END).await.is_err() {
            return Outcome::Aborted;
        }
        Outcome::Forwarded { status: reply.status }
    }
}

async fn write_all<W: AsyncWrite + Unpin>(out: &mut W, data: &[u8]) -> std::io::Result<()> {
    out.write_all(data).await?;
    out.flush().await
}

async fn reject<W: AsyncWrite + Unpin>(out: &mut W, code: u16, reason: &str) -> Outcome {
    let _ = write_all(out, &frame_error(code, reason)).await;
    Outcome::Rejected { code }
}
