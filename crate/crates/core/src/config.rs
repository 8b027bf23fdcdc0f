//! Gateway configuration: `key = value` lines grouped under `[gateway]`,
//! `[policy]` and `[tls]` sections.
//!
//! ```text
//! [gateway]
//! listen = 0.0.0.0:443
//! portmapper = 127.0.0.1:111
//! log-level = info
//!
//! [policy]
//! allow-prog = 100003:2,3,4
//! allow-prog = 100005
//! allow-client = 10.0.0.0/8
//! allow-backend = 127.0.0.1
//! max-record-bytes = 1048576
//!
//! [tls]
//! cert = /etc/rpctunnel/cert.pem
//! key = /etc/rpctunnel/key.pem
//! require-client-cert = false
//! ```
//!
//! `allow-*` keys may repeat. Values given on the command line replace file
//! values, which replace defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ipnet::IpNet;
use thiserror::Error;

use crate::gateway::{parse_network, GatewayPolicy, ProgramRule};
use crate::rpc::DEFAULT_MAX_RECORD;
use crate::tls::TlsServerConfig;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "RPCTUNNEL_CONFIG";
pub const DEFAULT_PORTMAPPER: &str = "127.0.0.1:111";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord)]
pub enum LogLevel {
    Error,
    #[default]
    Info,
    Debug,
}

impl FromStr for LogLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "error" => Ok(LogLevel::Error),
            "info" => Ok(LogLevel::Info),
            "debug" => Ok(LogLevel::Debug),
            _ => Err(format!("unknown log level {s:?} (expected error, info or debug)")),
        }
    }
}

impl fmt::Display for LogLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LogLevel::Error => "error",
            LogLevel::Info => "info",
            LogLevel::Debug => "debug",
        })
    }
}

/// One source of settings (file or flags). `None` means "not given here".
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigLayer {
    pub listen: Option<String>,
    pub portmapper: Option<String>,
    pub log_level: Option<LogLevel>,
    pub allow_prog: Option<Vec<ProgramRule>>,
    pub allow_client: Option<Vec<IpNet>>,
    pub allow_backend: Option<Vec<String>>,
    pub max_record_bytes: Option<usize>,
    pub tls_cert: Option<PathBuf>,
    pub tls_key: Option<PathBuf>,
    pub require_client_cert: Option<bool>,
    pub client_ca: Option<PathBuf>,
}

impl ConfigLayer {
    /// Fills every unset field of `self` from `lower`.
    pub fn over(self, lower: ConfigLayer) -> ConfigLayer {
        ConfigLayer {
            listen: self.listen.or(lower.listen),
            portmapper: self.portmapper.or(lower.portmapper),
            log_level: self.log_level.or(lower.log_level),
            allow_prog: self.allow_prog.or(lower.allow_prog),
            allow_client: self.allow_client.or(lower.allow_client),
            allow_backend: self.allow_backend.or(lower.allow_backend),
            max_record_bytes: self.max_record_bytes.or(lower.max_record_bytes),
            tls_cert: self.tls_cert.or(lower.tls_cert),
            tls_key: self.tls_key.or(lower.tls_key),
            require_client_cert: self.require_client_cert.or(lower.require_client_cert),
            client_ca: self.client_ca.or(lower.client_ca),
        }
    }
}

/// Result of parsing a config file: the settings plus non-fatal warnings.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedConfig {
    pub layer: ConfigLayer,
    pub warnings: Vec<String>,
}

fn push<T>(list: &mut Option<Vec<T>>, v: T) {
    list.get_or_insert_with(Vec::new).push(v);
}

pub fn parse_config(text: &str) -> Result<ParsedConfig, ConfigError> {
    let mut out = ParsedConfig::default();
    let mut section = String::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        let syntax = |message: String| ConfigError::Syntax { line: line_no, message };
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| syntax(format!("unterminated section header {line:?}")))?
                .trim();
            if !matches!(name, "gateway" | "policy" | "tls") {
                out.warnings.push(format!("line {line_no}: unknown section [{name}]"));
            }
            section = name.to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| syntax(format!("expected `key = value`, found {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(syntax("missing key before `=`".into()));
        }
        let bad = |e: String| syntax(format!("{key}: {e}"));
        let l = &mut out.layer;
        match (section.as_str(), key) {
            ("gateway", "listen") => l.listen = Some(value.to_string()),
            ("gateway", "portmapper") => l.portmapper = Some(value.to_string()),
            ("gateway", "log-level") => l.log_level = Some(value.parse().map_err(bad)?),
            ("policy", "allow-prog") => push(&mut l.allow_prog, value.parse().map_err(bad)?),
            ("policy", "allow-client") => push(&mut l.allow_client, parse_network(value).map_err(bad)?),
            ("policy", "allow-backend") => push(&mut l.allow_backend, value.to_string()),
            ("policy", "max-record-bytes") => {
                l.max_record_bytes = Some(value.parse().map_err(|_| bad(format!("invalid size {value:?}")))?)
            }
            ("tls", "cert") => l.tls_cert = Some(PathBuf::from(value)),
            ("tls", "key") => l.tls_key = Some(PathBuf::from(value)),
            ("tls", "require-client-cert") => {
                l.require_client_cert =
                    Some(value.parse().map_err(|_| bad(format!("expected true or false, got {value:?}")))?)
            }
            ("tls", "client-ca") => l.client_ca = Some(PathBuf::from(value)),
            _ => {
                let where_ = if section.is_empty() { "top level".to_string() } else { format!("[{section}]") };
                out.warnings.push(format!("line {line_no}: unknown key {key:?} in {where_}"));
            }
        }
    }
    Ok(out)
}

/// Effective gateway settings after merging all sources.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuntimeConfig {
    pub log_level: LogLevel,
    pub listen: String,
    pub portmapper: String,
    pub policy: GatewayPolicy,
    pub tls: Option<TlsServerConfig>,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        ConfigLayer::default().resolve().expect("defaults are valid")
    }
}

impl ConfigLayer {
    /// Applies defaults and checks cross-field constraints.
    pub fn resolve(self) -> Result<RuntimeConfig, ConfigError> {
        let tls = match (self.tls_cert, self.tls_key) {
            (Some(cert), Some(key)) => Some(TlsServerConfig {
                certificate_chain: cert,
                private_key: key,
                require_client_cert: self.require_client_cert.unwrap_or(false),
                client_ca: self.client_ca,
            }),
            (None, None) => {
                if self.require_client_cert == Some(true) {
                    return Err(ConfigError::Invalid(
                        "require-client-cert needs a TLS certificate and key".into(),
                    ));
                }
                None
            }
            _ => return Err(ConfigError::Invalid("TLS needs both a certificate and a key".into())),
        };
        let defaults = GatewayPolicy::default();
        let policy = GatewayPolicy {
            allowed_programs: self.allow_prog.unwrap_or_default(),
            allowed_client_networks: self.allow_client.unwrap_or_default(),
            allowed_backends: self.allow_backend.unwrap_or(defaults.allowed_backends),
            max_record_bytes: self.max_record_bytes.unwrap_or(DEFAULT_MAX_RECORD),
        };
        if policy.max_record_bytes == 0 {
            return Err(ConfigError::Invalid("max-record-bytes must be positive".into()));
        }
        let listen = self
            .listen
            .unwrap_or_else(|| if tls.is_some() { "0.0.0.0:443" } else { "0.0.0.0:80" }.to_string());
        Ok(RuntimeConfig {
            log_level: self.log_level.unwrap_or_default(),
            listen,
            portmapper: self.portmapper.unwrap_or_else(|| DEFAULT_PORTMAPPER.to_string()),
            policy,
            tls,
        })
    }
}

pub fn read_config_file(path: &Path) -> Result<ParsedConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_config(&text)
}

/// Reads a config file and resolves it against defaults. Warnings are logged.
pub fn load_config(path: &Path) -> Result<RuntimeConfig, ConfigError> {
    let parsed = read_config_file(path)?;
    for w in &parsed.warnings {
        tracing::warn!("{}: {w}", path.display());
    }
    parsed.layer.resolve()
}

impl fmt::Display for RuntimeConfig {
    /// Prints the effective configuration in the file format.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[gateway]")?;
        writeln!(f, "listen = {}", self.listen)?;
        writeln!(f, "portmapper = {}", self.portmapper)?;
        writeln!(f, "log-level = {}", self.log_level)?;
        writeln!(f)?;
        writeln!(f, "[policy]")?;
        for p in &self.policy.allowed_programs {
            writeln!(f, "allow-prog = {p}")?;
        }
        for n in &self.policy.allowed_client_networks {
            writeln!(f, "allow-client = {n}")?;
        }
        for b in &self.policy.allowed_backends {
            writeln!(f, "allow-backend = {b}")?;
        }
        writeln!(f, "max-record-bytes = {}", self.policy.max_record_bytes)?;
        if let Some(tls) = &self.tls {
            writeln!(f)?;
            writeln!(f, "[tls]")?;
            writeln!(f, "cert = {}", tls.certificate_chain.display())?;
            writeln!(f, "key = {}", tls.private_key.display())?;
            writeln!(f, "require-client-cert = {}", tls.require_client_cert)?;
            if let Some(ca) = &tls.client_ca {
                writeln!(f, "client-ca = {}", ca.display())?;
            }
        }
        Ok(())
    }
}
