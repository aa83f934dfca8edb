use std::fmt;
use std::str::FromStr;

use super::WireError;

pub const PROTOCOL_VERSION: u32 = 1;
/// Largest request body accepted on the channel (10 MiB).
pub const MAX_BODY_BYTES: u64 = 10_485_760;
/// Largest raw command line the parser will look at.
pub const MAX_COMMAND_BYTES: usize = 4096;

const PING: &str = "PING";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Get,
    Post,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Get => "GET",
            Method::Post => "POST",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The closed set of upstream paths a request may target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ApiPath {
    ChatCompletions,
    Completions,
    Models,
    Health,
}

impl ApiPath {
    pub const ALL: [ApiPath; 4] = [
        ApiPath::ChatCompletions,
        ApiPath::Completions,
        ApiPath::Models,
        ApiPath::Health,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ApiPath::ChatCompletions => "/v1/chat/completions",
            ApiPath::Completions => "/v1/completions",
            ApiPath::Models => "/v1/models",
            ApiPath::Health => "/health",
        }
    }

    /// Exact match against the allowlist. No normalisation is applied.
    pub fn from_path(path: &str) -> Option<ApiPath> {
        ApiPath::ALL.into_iter().find(|p| p.as_str() == path)
    }
}

impl fmt::Display for ApiPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A service name: `[a-z0-9-]{1,64}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ServiceName(String);

impl ServiceName {
    pub const MAX_LEN: usize = 64;

    pub fn new(name: &str) -> Option<ServiceName> {
        Self::is_valid(name).then(|| ServiceName(name.to_owned()))
    }

    pub fn is_valid(name: &str) -> bool {
        !name.is_empty()
            && name.len() <= Self::MAX_LEN
            && name
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ServiceName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for ServiceName {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ServiceName::new(s).ok_or(WireError::InvalidRequest("service name"))
    }
}

impl AsRef<str> for ServiceName {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireRequest {
    pub version: u32,
    pub method: Method,
    pub service: ServiceName,
    pub path: ApiPath,
    pub content_length: u64,
    pub stream: bool,
}

impl WireRequest {
    pub fn new(
        method: Method,
        service: ServiceName,
        path: ApiPath,
        content_length: u64,
        stream: bool,
    ) -> Self {
        WireRequest {
            version: PROTOCOL_VERSION,
            method,
            service,
            path,
            content_length,
            stream,
        }
    }

    pub fn validate(&self) -> Result<(), WireError> {
        if self.version != PROTOCOL_VERSION {
            return Err(WireError::InvalidRequest("unsupported version"));
        }
        if !ServiceName::is_valid(self.service.as_str()) {
            return Err(WireError::InvalidRequest("service name"));
        }
        if self.content_length > MAX_BODY_BYTES {
            return Err(WireError::InvalidRequest("content length above cap"));
        }
        if self.method == Method::Get && self.content_length != 0 {
            return Err(WireError::InvalidRequest("GET with a body"));
        }
        Ok(())
    }
}

/// The distinguished keep-alive command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct KeepAlivePing;

impl KeepAlivePing {
    pub fn command_line(self) -> &'static str {
        PING
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Ping(KeepAlivePing),
    Request(WireRequest),
}

/// Renders the command line for a request. The body is sent separately on
/// the invocation's input stream and must be exactly `content_length` octets.
pub fn encode_request(req: &WireRequest) -> Result<String, WireError> {
    req.validate()?;
    Ok(format!(
        "REQ {} {} {} {} {} {}",
        req.version,
        req.method,
        req.service,
        req.path,
        req.content_length,
        if req.stream { 'S' } else { 'N' },
    ))
}

pub fn parse_command_bytes(raw: &[u8]) -> Result<Command, WireError> {
    if raw.len() > MAX_COMMAND_BYTES {
        return reject(WireError::MalformedCommand("command too long"));
    }
    match std::str::from_utf8(raw) {
        Ok(line) => parse_command(line),
        Err(_) => reject(WireError::MalformedCommand("not utf-8")),
    }
}

/// Parses a raw command line. The input is only ever compared against the
/// grammar; nothing in it is evaluated.
pub fn parse_command(line: &str) -> Result<Command, WireError> {
    parse_inner(line).or_else(reject)
}

fn reject<T>(err: WireError) -> Result<T, WireError> {
    tracing::debug!(reason = %err, "command rejected");
    Err(err)
}

fn parse_inner(line: &str) -> Result<Command, WireError> {
    if line.len() > MAX_COMMAND_BYTES {
        return Err(WireError::MalformedCommand("command too long"));
    }
    if line == PING {
        return Ok(Command::Ping(KeepAlivePing));
    }

    let tokens: Vec<&str> = line.split(' ').collect();
    if tokens.first() != Some(&"REQ") {
        return Err(WireError::MalformedCommand("unknown verb"));
    }
    let [_, version, method, service, path, length, stream] = tokens[..] else {
        return Err(WireError::MalformedCommand("wrong arity"));
    };

    if version != "1" {
        return Err(WireError::MalformedCommand("bad version"));
    }
    let method = match method {
        "GET" => Method::Get,
        "POST" => Method::Post,
        _ => return Err(WireError::MalformedCommand("bad method")),
    };
    let service = ServiceName::new(service).ok_or(WireError::MalformedCommand("bad service"))?;
    let path = ApiPath::from_path(path).ok_or(WireError::PathNotAllowed)?;
    let content_length = parse_length(length)?;
    let stream = match stream {
        "S" => true,
        "N" => false,
        _ => return Err(WireError::MalformedCommand("bad stream flag")),
    };
    if method == Method::Get && content_length != 0 {
        return Err(WireError::MalformedCommand("GET with a body"));
    }

    Ok(Command::Request(WireRequest {
        version: PROTOCOL_VERSION,
        method,
        service,
        path,
        content_length,
        stream,
    }))
}

/// Canonical decimal only: digits, no sign, no leading zeros.
fn parse_length(token: &str) -> Result<u64, WireError> {
    if token.is_empty() || !token.bytes().all(|b| b.is_ascii_digit()) {
        return Err(WireError::MalformedCommand("bad content length"));
    }
    if token.len() > 1 && token.starts_with('0') {
        return Err(WireError::MalformedCommand("bad content length"));
    }
    match token.parse::<u64>() {
        Ok(n) if n <= MAX_BODY_BYTES => Ok(n),
        _ => Err(WireError::BodyTooLarge),
    }
}
