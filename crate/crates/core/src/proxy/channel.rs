//! The restricted command channel: one invocation per request, the command
//! line passed out-of-band and the body on the invocation's input.

use std::io;
use std::pin::Pin;
use std::process::Stdio;
use std::sync::Arc;
use std::task::{Context, Poll};

use bytes::Bytes;
use futures::future::BoxFuture;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncWriteExt, ReadBuf};
use tokio::process::{Child, ChildStdout, Command};
use tokio::sync::watch;

use crate::interface::Interface;

/// Environment variable carrying the original command, as set by sshd
/// for a forced command.
pub const ORIGINAL_COMMAND_ENV: &str = "SSH_ORIGINAL_COMMAND";

const LOCAL_PIPE_BYTES: usize = 256 * 1024;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ChannelError {
    /// The invocation could not be started.
    #[error("channel unavailable: {0}")]
    Unavailable(String),
    /// The invocation started but its output broke off.
    #[error("channel broke: {0}")]
    Broken(String),
}

pub type ChannelReader = Pin<Box<dyn AsyncRead + Send>>;

pub trait Channel: Send + Sync + 'static {
    /// Starts one invocation and returns its output stream.
    fn invoke(&self, command: String, body: Bytes) -> BoxFuture<'static, Result<ChannelReader, ChannelError>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkMode {
    Up,
    /// New invocations fail at once, in-flight ones are cut.
    Refuse,
    /// New invocations never answer, in-flight ones are cut.
    Hang,
}

/// In-process transport straight into an [`Interface`]. The link can be
/// severed for fault tests.
pub struct LocalChannel {
    iface: Arc<Interface>,
    link: watch::Sender<LinkMode>,
}

impl LocalChannel {
    pub fn new(iface: Arc<Interface>) -> Self {
        LocalChannel {
            iface,
            link: watch::channel(LinkMode::Up).0,
        }
    }

    pub fn set_link(&self, mode: LinkMode) {
        self.link.send_replace(mode);
    }

    pub fn link(&self) -> LinkMode {
        *self.link.borrow()
    }
}

impl Channel for LocalChannel {
    fn invoke(&self, command: String, body: Bytes) -> BoxFuture<'static, Result<ChannelReader, ChannelError>> {
        let mode = self.link();
        let iface = self.iface.clone();
        let mut link = self.link.subscribe();
        Box::pin(async move {
            match mode {
                LinkMode::Refuse => return Err(ChannelError::Unavailable("link down".into())),
                LinkMode::Hang => futures::future::pending::<()>().await,
                LinkMode::Up => {}
            }
            let (mut writer, reader) = tokio::io::duplex(LOCAL_PIPE_BYTES);
            tokio::spawn(async move {
                let mut input: &[u8] = &body;
                tokio::select! {
                    _ = iface.handle_invocation(command.as_bytes(), &mut input, &mut writer) => {}
                    _ = link.wait_for(|m| *m != LinkMode::Up) => {}
                }
            });
            Ok(Box::pin(reader) as ChannelReader)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandDelivery {
    /// Appended as the last argument, e.g. to `ssh host`; the server's
    /// forced command sees it in its environment.
    Argument,
    /// Set directly in the child's environment; for running the
    /// interface entrypoint locally without sshd.
    Environment,
}

/// One child process per invocation, e.g. `ssh -T svc@login` with a
/// forced command on the far side.
#[derive(Debug, Clone)]
pub struct ProcessChannel {
    pub program: String,
    pub args: Vec<String>,
    pub delivery: CommandDelivery,
}

struct ChildOutput {
    stdout: ChildStdout,
    _child: Child,
}

impl AsyncRead for ChildOutput {
    fn poll_read(mut self: Pin<&mut Self>, cx: &mut Context<'_>, buf: &mut ReadBuf<'_>) -> Poll<io::Result<()>> {
        Pin::new(&mut self.stdout).poll_read(cx, buf)
    }
}

impl Channel for ProcessChannel {
    fn invoke(&self, command: String, body: Bytes) -> BoxFuture<'static, Result<ChannelReader, ChannelError>> {
        let mut cmd = Command::new(&self.program);
        cmd.args(&self.args);
        match self.delivery {
            CommandDelivery::Argument => {
                cmd.arg(&command);
            }
            CommandDelivery::Environment => {
                cmd.env(ORIGINAL_COMMAND_ENV, &command);
            }
        }
        cmd.stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .kill_on_drop(true);
        Box::pin(async move {
            let mut child = cmd.spawn().map_err(|e| ChannelError::Unavailable(e.to_string()))?;
            let mut stdin = child.stdin.take().expect("piped stdin");
            let stdout = child.stdout.take().expect("piped stdout");
            tokio::spawn(async move {
                if !body.is_empty() {
                    let _ = stdin.write_all(&body).await;
                }
                let _ = stdin.shutdown().await;
            });
            Ok(Box::pin(ChildOutput { stdout, _child: child }) as ChannelReader)
        })
    }
}
