//! The command-channel protocol.
//!
//! A channel invocation carries one command line (delivered out-of-band,
//! never through a shell), an optional body on the invocation's input
//! stream, and a framed reply on its output stream. Everything in here is a
//! pure codec: no I/O, no shared state.

mod command;
mod frame;
mod pong;

pub use command::{
    encode_request, parse_command, parse_command_bytes, ApiPath, Command, KeepAlivePing, Method,
    ServiceName, WireRequest, MAX_BODY_BYTES, MAX_COMMAND_BYTES, PROTOCOL_VERSION,
};
pub use frame::{
    frame_chunks, frame_error, frame_head, frame_response, is_forwardable_header,
    parse_response, ErrorFrame, FrameDecoder, FrameEvent, FramedReply, WireResponse, FRAME_END,
    MAX_CHUNK_BYTES,
};
pub use pong::{Pong, ServiceSummary};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("invalid request: {0}")]
    InvalidRequest(&'static str),
    #[error("malformed command: {0}")]
    MalformedCommand(&'static str),
    #[error("path not allowed")]
    PathNotAllowed,
    #[error("body too large")]
    BodyTooLarge,
    #[error("framing error: {0}")]
    FramingError(&'static str),
    #[error("stream truncated")]
    TruncatedStream,
}
