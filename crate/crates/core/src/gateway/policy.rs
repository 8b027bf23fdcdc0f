use std::collections::BTreeSet;
use std::fmt;
use std::net::IpAddr;
use std::str::FromStr;

use ipnet::IpNet;

use crate::rpc::DEFAULT_MAX_RECORD;

pub const DEFAULT_BACKEND: &str = "127.0.0.1";

/// One allowlisted program, optionally restricted to some versions.
///
/// Textual form: `<prog>` or `<prog>:<vers>,<vers>,...`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ProgramRule {
    pub prog: u32,
    pub versions: Option<BTreeSet<u32>>,
}

impl ProgramRule {
    pub fn any_version(prog: u32) -> Self {
        ProgramRule { prog, versions: None }
    }

    pub fn with_versions(prog: u32, versions: impl IntoIterator<Item = u32>) -> Self {
        ProgramRule { prog, versions: Some(versions.into_iter().collect()) }
    }

    pub fn allows(&self, prog: u32, vers: u32) -> bool {
        self.prog == prog && self.versions.as_ref().is_none_or(|v| v.contains(&vers))
    }
}

impl FromStr for ProgramRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let num = |t: &str| {
            t.trim().parse::<u32>().map_err(|_| format!("invalid number {:?} in program rule {s:?}", t.trim()))
        };
        match s.split_once(':') {
            None => Ok(ProgramRule::any_version(num(s)?)),
            Some((prog, vers)) => {
                let versions = vers.split(',').map(num).collect::<Result<BTreeSet<_>, _>>()?;
                Ok(ProgramRule { prog: num(prog)?, versions: Some(versions) })
            }
        }
    }
}

impl fmt::Display for ProgramRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.prog)?;
        if let Some(versions) = &self.versions {
            let list: Vec<String> = versions.iter().map(u32::to_string).collect();
            write!(f, ":{}", list.join(","))?;
        }
        Ok(())
    }
}

/// Parses a CIDR prefix; a bare address is taken as a host route.
pub fn parse_network(s: &str) -> Result<IpNet, String> {
    let s = s.trim();
    s.parse::<IpNet>()
        .or_else(|_| s.parse::<IpAddr>().map(IpNet::from))
        .map_err(|_| format!("invalid network {s:?}"))
}

/// Proxy-level access control.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatewayPolicy {
    /// Empty means every call is denied.
    pub allowed_programs: Vec<ProgramRule>,
    /// Empty means clients from any address are accepted.
    pub allowed_client_networks: Vec<IpNet>,
    /// Hosts the gateway may forward to. The first is used unless the
    /// request names another listed host.
    pub allowed_backends: Vec<String>,
    pub max_record_bytes: usize,
}

impl Default for GatewayPolicy {
    fn default() -> Self {
        GatewayPolicy {
            allowed_programs: Vec::new(),
            allowed_client_networks: Vec::new(),
            allowed_backends: vec![DEFAULT_BACKEND.to_string()],
            max_record_bytes: DEFAULT_MAX_RECORD,
        }
    }
}

impl GatewayPolicy {
    pub fn allow_program(mut self, rule: ProgramRule) -> Self {
        self.allowed_programs.push(rule);
        self
    }

    pub fn allows_program(&self, prog: u32, vers: u32) -> bool {
        self.allowed_programs.iter().any(|r| r.allows(prog, vers))
    }

    pub fn allows_client(&self, addr: Option<IpAddr>) -> bool {
        if self.allowed_client_networks.is_empty() {
            return true;
        }
        let Some(addr) = addr else {
            return false;
        };
        let addr = addr.to_canonical();
        self.allowed_client_networks.iter().any(|n| n.contains(&addr))
    }

    /// The backend host for a request, honouring `hint` only when it is allowlisted.
    pub fn backend_for(&self, hint: Option<&str>) -> Option<&str> {
        if let Some(h) = hint {
            if let Some(b) = self.allowed_backends.iter().find(|b| b.as_str() == h) {
                return Some(b);
            }
        }
        self.allowed_backends.first().map(String::as_str)
    }

    /// Largest framed body that could possibly carry a record within
    /// `max_record_bytes`: one-byte fragments plus a trailing empty one.
    pub fn max_body_bytes(&self) -> usize {
        self.max_record_bytes.saturating_mul(5).saturating_add(4)
    }
}
