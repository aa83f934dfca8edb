use super::{ServiceName, WireError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceSummary {
    pub service: ServiceName,
    pub ready: u32,
    pub desired: u32,
}

/// Reply to a keep-alive ping: `PONG\n`, one `SVC <name> <ready> <desired>\n`
/// per service, then `END\n`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Pong {
    pub services: Vec<ServiceSummary>,
}

impl Pong {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = String::from("PONG\n");
        for s in &self.services {
            out.push_str(&format!("SVC {} {} {}\n", s.service, s.ready, s.desired));
        }
        out.push_str("END\n");
        out.into_bytes()
    }

    pub fn parse(raw: &[u8]) -> Result<Pong, WireError> {
        let text = std::str::from_utf8(raw).map_err(|_| WireError::FramingError("pong not utf-8"))?;
        let body = text
            .strip_prefix("PONG\n")
            .ok_or(WireError::FramingError("expected PONG"))?;
        let Some(body) = body.strip_suffix("END\n") else {
            return Err(WireError::TruncatedStream);
        };
        let mut services = Vec::new();
        for line in body.lines() {
            let mut parts = line.split(' ');
            let (Some("SVC"), Some(name), Some(ready), Some(desired), None) = (
                parts.next(),
                parts.next(),
                parts.next(),
                parts.next(),
                parts.next(),
            ) else {
                return Err(WireError::FramingError("bad SVC line"));
            };
            let service = ServiceName::new(name).ok_or(WireError::FramingError("bad service"))?;
            let ready = ready.parse().map_err(|_| WireError::FramingError("bad count"))?;
            let desired = desired.parse().map_err(|_| WireError::FramingError("bad count"))?;
            services.push(ServiceSummary {
                service,
                ready,
                desired,
            });
        }
        Ok(Pong { services })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pong_format() {
        let pong = Pong {
            services: vec![ServiceSummary {
                service: ServiceName::new("qwen2-72b").unwrap(),
                ready: 2,
                desired: 2,
            }],
        };
        assert_eq!(pong.encode(), b"PONG\nSVC qwen2-72b 2 2\nEND\n");
        assert_eq!(Pong::parse(&pong.encode()), Ok(pong));
        assert_eq!(Pong::parse(b"PONG\nEND\n"), Ok(Pong::default()));
    }

    #[test]
    fn pong_rejects_garbage() {
        assert!(Pong::parse(b"PONG\nSVC a 1\nEND\n").is_err());
        assert!(Pong::parse(b"PONG\nSVC a 1 x\nEND\n").is_err());
        assert_eq!(Pong::parse(b"PONG\n"), Err(WireError::TruncatedStream));
        assert!(Pong::parse(b"ERR 502 x\n").is_err());
    }
}
