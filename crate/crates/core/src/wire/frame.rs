//! Response framing: line-oriented ASCII control lines with binary chunk
//! payloads.
//!
//! ```text
//! STATUS <code>\n
//! HDR <name>: <value>\n      (zero or more)
//! BODY\n
//! CHUNK <len>\n<len octets>  (zero or more)
//! END\n
//! ```
//!
//! or a single `ERR <code> <reason>\n` line.

use bytes::{Buf, Bytes, BytesMut};

use super::WireError;

/// Largest payload carried by one `CHUNK` frame.
pub const MAX_CHUNK_BYTES: usize = 65_536;
const MAX_CONTROL_LINE: usize = 1024;
const ALLOWED_HEADERS: [&str; 1] = ["content-type"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<Bytes>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorFrame {
    pub code: u16,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FramedReply {
    Response(WireResponse),
    Error(ErrorFrame),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameEvent {
    Status(u16),
    Header(String, String),
    BodyStart,
    Chunk(Bytes),
    End,
    Error(ErrorFrame),
}

fn valid_status(code: u16) -> bool {
    (100..=599).contains(&code)
}

fn printable(s: &str) -> bool {
    s.bytes().all(|b| (0x20..0x7f).contains(&b))
}

pub fn is_forwardable_header(name: &str) -> bool {
    ALLOWED_HEADERS.contains(&name)
}

/// Frames the status line and headers. Headers outside the allowlist are
/// an error here; callers that relay upstream headers filter first.
pub fn frame_head(status: u16, headers: &[(String, String)]) -> Result<Vec<u8>, WireError> {
    if !valid_status(status) {
        return Err(WireError::FramingError("status out of range"));
    }
    let mut out = format!("STATUS {status}\n");
    for (name, value) in headers {
        if !is_forwardable_header(name) {
            return Err(WireError::FramingError("header not allowed"));
        }
        if !printable(value) {
            return Err(WireError::FramingError("header value not printable"));
        }
        out.push_str(&format!("HDR {name}: {value}\n"));
    }
    out.push_str("BODY\n");
    Ok(out.into_bytes())
}

/// Appends `data` as one or more `CHUNK` frames of at most
/// [`MAX_CHUNK_BYTES`] each.
pub fn frame_chunks(data: &[u8], out: &mut Vec<u8>) {
    for piece in data.chunks(MAX_CHUNK_BYTES) {
        out.extend_from_slice(format!("CHUNK {}\n", piece.len()).as_bytes());
        out.extend_from_slice(piece);
    }
}

pub const FRAME_END: &[u8] = b"END\n";

pub fn frame_response(resp: &WireResponse) -> Result<Vec<u8>, WireError> {
    let mut out = frame_head(resp.status, &resp.headers)?;
    for chunk in &resp.body {
        if chunk.len() > MAX_CHUNK_BYTES {
            return Err(WireError::FramingError("chunk above cap"));
        }
        out.extend_from_slice(format!("CHUNK {}\n", chunk.len()).as_bytes());
        out.extend_from_slice(chunk);
    }
    out.extend_from_slice(FRAME_END);
    Ok(out)
}

pub fn frame_error(code: u16, reason: &str) -> Vec<u8> {
    let code = if valid_status(code) { code } else { 502 };
    let reason: String = reason
        .chars()
        .map(|c| if c.is_ascii() && !c.is_ascii_control() { c } else { '?' })
        .collect();
    let reason = if reason.is_empty() { "error".into() } else { reason };
    format!("ERR {code} {reason}\n").into_bytes()
}

/// Decodes a complete framed reply.
pub fn parse_response(stream: &[u8]) -> Result<FramedReply, WireError> {
    let mut decoder = FrameDecoder::new();
    decoder.feed(stream);
    let mut status = None;
    let mut headers = Vec::new();
    let mut body = Vec::new();
    while let Some(event) = decoder.next_event()? {
        match event {
            FrameEvent::Status(code) => status = Some(code),
            FrameEvent::Header(name, value) => headers.push((name, value)),
            FrameEvent::BodyStart => {}
            FrameEvent::Chunk(chunk) => body.push(chunk),
            FrameEvent::End => {
                decoder.finish()?;
                let status = status.ok_or(WireError::FramingError("missing status"))?;
                return Ok(FramedReply::Response(WireResponse {
                    status,
                    headers,
                    body,
                }));
            }
            FrameEvent::Error(err) => {
                decoder.finish()?;
                return Ok(FramedReply::Error(err));
            }
        }
    }
    Err(WireError::TruncatedStream)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Start,
    Headers,
    Chunks,
    InChunk(usize),
    Done,
}

/// Incremental decoder. Feed octets as they arrive and pull events; each
/// chunk is surfaced as soon as its payload is complete.
#[derive(Debug)]
pub struct FrameDecoder {
    buf: BytesMut,
    state: State,
}

impl Default for FrameDecoder {
    fn default() -> Self {
        Self::new()
    }
}

impl FrameDecoder {
    pub fn new() -> Self {
        FrameDecoder {
            buf: BytesMut::new(),
            state: State::Start,
        }
    }

    pub fn feed(&mut self, data: &[u8]) {
        self.buf.extend_from_slice(data);
    }

    pub fn is_done(&self) -> bool {
        self.state == State::Done
    }

    /// Checks that the stream ended on a terminal frame with nothing after.
    pub fn finish(&self) -> Result<(), WireError> {
        match self.state {
            State::Done if self.buf.is_empty() => Ok(()),
            State::Done => Err(WireError::FramingError("trailing data")),
            _ => Err(WireError::TruncatedStream),
        }
    }

    pub fn next_event(&mut self) -> Result<Option<FrameEvent>, WireError> {
        match self.state {
            State::Done => {
                if self.buf.is_empty() {
                    Ok(None)
                } else {
                    Err(WireError::FramingError("trailing data"))
                }
            }
            State::InChunk(len) => {
                if self.buf.len() < len {
                    return Ok(None);
                }
                let chunk = self.buf.split_to(len).freeze();
                self.state = State::Chunks;
                Ok(Some(FrameEvent::Chunk(chunk)))
            }
            state => {
                let Some(line) = self.take_line()? else {
                    return Ok(None);
                };
                match self.control(state, &line)? {
                    Some(event) => Ok(Some(event)),
                    // chunk header consumed; payload may already be buffered
                    None => self.next_event(),
                }
            }
        }
    }

    fn take_line(&mut self) -> Result<Option<String>, WireError> {
        let Some(pos) = self.buf.iter().position(|&b| b == b'\n') else {
            if self.buf.len() > MAX_CONTROL_LINE {
                return Err(WireError::FramingError("control line too long"));
            }
            return Ok(None);
        };
        if pos > MAX_CONTROL_LINE {
            return Err(WireError::FramingError("control line too long"));
        }
        let line = self.buf.split_to(pos);
        self.buf.advance(1);
        let line = String::from_utf8(line.to_vec())
            .map_err(|_| WireError::FramingError("control line not ascii"))?;
        if !printable(&line) {
            return Err(WireError::FramingError("control line not printable"));
        }
        Ok(Some(line))
    }

    fn control(&mut self, state: State, line: &str) -> Result<Option<FrameEvent>, WireError> {
        match state {
            State::Start => {
                if let Some(code) = line.strip_prefix("STATUS ") {
                    let code = parse_status(code)?;
                    self.state = State::Headers;
                    Ok(Some(FrameEvent::Status(code)))
                } else if let Some(rest) = line.strip_prefix("ERR ") {
                    let (code, reason) = rest
                        .split_once(' ')
                        .ok_or(WireError::FramingError("bad error frame"))?;
                    let code = parse_status(code)?;
                    if reason.is_empty() {
                        return Err(WireError::FramingError("bad error frame"));
                    }
                    self.state = State::Done;
                    Ok(Some(FrameEvent::Error(ErrorFrame {
                        code,
                        reason: reason.to_owned(),
                    })))
                } else {
                    Err(WireError::FramingError("expected STATUS or ERR"))
                }
            }
            State::Headers => {
                if line == "BODY" {
                    self.state = State::Chunks;
                    Ok(Some(FrameEvent::BodyStart))
                } else if let Some(rest) = line.strip_prefix("HDR ") {
                    let (name, value) = rest
                        .split_once(": ")
                        .ok_or(WireError::FramingError("bad header"))?;
                    if !is_forwardable_header(name) {
                        return Err(WireError::FramingError("header not allowed"));
                    }
                    Ok(Some(FrameEvent::Header(name.to_owned(), value.to_owned())))
                } else {
                    Err(WireError::FramingError("expected HDR or BODY"))
                }
            }
            State::Chunks => {
                if line == "END" {
                    self.state = State::Done;
                    Ok(Some(FrameEvent::End))
                } else if let Some(len) = line.strip_prefix("CHUNK ") {
                    let len = parse_decimal(len)
                        .filter(|&n| n <= MAX_CHUNK_BYTES as u64)
                        .ok_or(WireError::FramingError("bad chunk length"))?;
                    if len == 0 {
                        return Ok(Some(FrameEvent::Chunk(Bytes::new())));
                    }
                    self.state = State::InChunk(len as usize);
                    Ok(None)
                } else {
                    Err(WireError::FramingError("expected CHUNK or END"))
                }
            }
            State::InChunk(_) | State::Done => unreachable!("handled by next_event"),
        }
    }
}

fn parse_decimal(token: &str) -> Option<u64> {
    if token.is_empty() || token.len() > 12 || !token.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if token.len() > 1 && token.starts_with('0') {
        return None;
    }
    token.parse().ok()
}

fn parse_status(token: &str) -> Result<u16, WireError> {
    parse_decimal(token)
        .and_then(|n| u16::try_from(n).ok())
        .filter(|&n| valid_status(n))
        .ok_or(WireError::FramingError("bad status code"))
}
