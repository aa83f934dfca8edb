//! Serving plane for running model endpoints as batch-scheduler jobs.
//!
//! * [`wire`]: the restricted command-channel protocol and its parser.
//! * [`proxy`]: the HTTP ingress that forwards over the channel.
//! * [`interface`]: the per-invocation entrypoint on the cluster side.
//! * [`scheduler`]: reconciliation, autoscaling and the routing table.
//! * [`simcluster`]: a workload-manager simulator and mock model servers.
//! * [`config`]: the deployment file read by every `hpcgate` verb.
//! * [`stack`]: all of the above in one process over loopback.
//! * [`bench`](mod@bench) and [`report`]: latency and throughput harness, report files.

pub mod clock;
pub mod wire;
pub mod routing;
pub mod loadlog;
pub mod resolve;
pub mod interface;
pub mod proxy;
pub mod scheduler;
pub mod simcluster;
pub mod config;
pub mod stack;
pub mod bench;
pub mod report;
