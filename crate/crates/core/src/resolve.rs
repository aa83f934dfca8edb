use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Maps workload-manager node names to network hosts.
///
/// By default a node name is used as the host name. The simulator binds
/// every mock server on loopback, so it sets `default_host`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeResolver {
    #[serde(default)]
    pub default_host: Option<String>,
    #[serde(default)]
    pub hosts: BTreeMap<String, String>,
}

impl NodeResolver {
    pub fn loopback() -> Self {
        NodeResolver {
            default_host: Some("127.0.0.1".into()),
            hosts: BTreeMap::new(),
        }
    }

    pub fn host<'a>(&'a self, node: &'a str) -> &'a str {
        self.hosts
            .get(node)
            .map(String::as_str)
            .or(self.default_host.as_deref())
            .unwrap_or(node)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolution_order() {
        let mut r = NodeResolver::default();
        assert_eq!(r.host("gpu01"), "gpu01");
        r.default_host = Some("127.0.0.1".into());
        assert_eq!(r.host("gpu01"), "127.0.0.1");
        r.hosts.insert("gpu01".into(), "10.0.0.7".into());
        assert_eq!(r.host("gpu01"), "10.0.0.7");
    }
}
