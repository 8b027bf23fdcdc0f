use std::net::IpAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use tokio::io::AsyncWriteExt;
use tokio::net::TcpStream;
use tracing::debug;

use super::{GatewayError, GatewayPolicy};
use crate::portmap::{PortmapClient, DEFAULT_PORTMAP_TIMEOUT, IPPROTO_TCP};
use crate::rpc::{parse_call_target, read_record, read_record_async, scan_record, HexDump, RpcError};
use crate::tcpfilter::host_port;

pub const CONTENT_TYPE_OCTET_STREAM: &str = "application/octet-stream";
/// Non-standard media type accepted as a synonym for octet-stream.
pub const CONTENT_TYPE_STREAM: &str = "application/stream";
const CONTENT_TYPE_TEXT: &str = "text/plain; charset=utf-8";

pub const DEFAULT_BACKEND_TIMEOUT: Duration = Duration::from_secs(30);

/// One decapsulation request: the POSTed body plus what is known about its sender.
#[derive(Debug, Clone, Copy)]
pub struct GatewayRequest<'a> {
    pub body: &'a [u8],
    pub client: Option<IpAddr>,
    /// Backend host named by the tunnel client, if any.
    pub server_hint: Option<&'a str>,
}

impl<'a> GatewayRequest<'a> {
    pub fn new(body: &'a [u8]) -> Self {
        GatewayRequest { body, client: None, server_hint: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatewayResponse {
    pub status: u16,
    pub content_type: &'static str,
    pub body: Vec<u8>,
}

impl GatewayResponse {
    pub fn ok(body: Vec<u8>) -> Self {
        GatewayResponse { status: 200, content_type: CONTENT_TYPE_OCTET_STREAM, body }
    }

    pub fn error(status: u16, message: &str) -> Self {
        GatewayResponse {
            status,
            content_type: CONTENT_TYPE_TEXT,
            body: format!("{message}\n").into_bytes(),
        }
    }

    pub fn from_error(e: &GatewayError) -> Self {
        Self::error(e.status(), &e.to_string())
    }
}

/// Checks the request method and content type shared by the HTTP server and CGI mode.
pub fn check_request_shape(method: Option<&str>, content_type: Option<&str>) -> Option<GatewayResponse> {
    if let Some(m) = method {
        if !m.eq_ignore_ascii_case("POST") {
            return Some(GatewayResponse::error(405, "method not allowed; use POST"));
        }
    }
    if let Some(ct) = content_type {
        let essence = ct.split(';').next().unwrap_or("").trim();
        if !essence.eq_ignore_ascii_case(CONTENT_TYPE_OCTET_STREAM)
            && !essence.eq_ignore_ascii_case(CONTENT_TYPE_STREAM)
        {
            return Some(GatewayResponse::error(415, &format!("unsupported content type {essence:?}")));
        }
    }
    None
}

#[derive(Debug, Default)]
pub struct GatewayStats {
    pub requests: AtomicU64,
    pub denied: AtomicU64,
    pub forwarded: AtomicU64,
}

impl GatewayStats {
    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    pub fn forwarded(&self) -> u64 {
        self.forwarded.load(Ordering::Relaxed)
    }
}

/// The decapsulation pipeline, independent of how requests arrive.
#[derive(Debug)]
pub struct Gateway {
    policy: GatewayPolicy,
    portmapper: String,
    portmap_timeout: Duration,
    backend_timeout: Duration,
    stats: GatewayStats,
}

impl Gateway {
    pub fn new(policy: GatewayPolicy, portmapper: impl Into<String>) -> Self {
        Gateway {
            policy,
            portmapper: portmapper.into(),
            portmap_timeout: DEFAULT_PORTMAP_TIMEOUT,
            backend_timeout: DEFAULT_BACKEND_TIMEOUT,
            stats: GatewayStats::default(),
        }
    }

    pub fn with_timeouts(mut self, portmap: Duration, backend: Duration) -> Self {
        self.portmap_timeout = portmap;
        self.backend_timeout = backend;
        self
    }

    pub fn policy(&self) -> &GatewayPolicy {
        &self.policy
    }

    pub fn stats(&self) -> &GatewayStats {
        &self.stats
    }

    pub fn too_large(&self) -> GatewayResponse {
        GatewayResponse::from_error(&GatewayError::TooLarge { max: self.policy.max_record_bytes })
    }

    /// Runs one POSTed call through the whole pipeline and produces the HTTP outcome.
    pub async fn handle_rpc_post(&self, req: GatewayRequest<'_>) -> GatewayResponse {
        self.stats.requests.fetch_add(1, Ordering::Relaxed);
        match self.process(req).await {
            Ok(reply) => GatewayResponse::ok(reply),
            Err(e) => {
                if e.status() == 403 {
                    self.stats.denied.fetch_add(1, Ordering::Relaxed);
                }
                debug!(status = e.status(), "request failed: {e}");
                GatewayResponse::from_error(&e)
            }
        }
    }

    async fn process(&self, req: GatewayRequest<'_>) -> Result<Vec<u8>, GatewayError> {
        let policy = &self.policy;
        if !policy.allows_client(req.client) {
            return Err(GatewayError::Forbidden(match req.client {
                Some(ip) => format!("client {ip} not allowed"),
                None => "client address unknown".into(),
            }));
        }
        if req.body.len() > policy.max_body_bytes() {
            return Err(GatewayError::TooLarge { max: policy.max_record_bytes });
        }
        // framing is checked against the bytes actually present before the
        // size limit, so a bogus length header is a 400, not a 413
        let extent = scan_record(req.body).map_err(|e| GatewayError::Malformed(e.to_string()))?;
        if extent.record_len > policy.max_record_bytes {
            return Err(GatewayError::TooLarge { max: policy.max_record_bytes });
        }
        if extent.framed_len != req.body.len() {
            return Err(GatewayError::Malformed(format!(
                "{} bytes after the first record; one call per request",
                req.body.len() - extent.framed_len
            )));
        }
        let framed = read_record(&mut &req.body[..], policy.max_record_bytes)
            .map_err(|e| GatewayError::Malformed(e.to_string()))?;
        let target = parse_call_target(framed.record.as_bytes())
            .map_err(|e| GatewayError::Malformed(e.to_string()))?;
        if !policy.allows_program(target.prog, target.vers) {
            return Err(GatewayError::Forbidden(format!(
                "program {} version {} not allowed",
                target.prog, target.vers
            )));
        }
        let backend = self.resolve_backend(target.prog, target.vers, req.server_hint).await?;
        debug!(xid = target.xid, prog = target.prog, vers = target.vers, %backend, "forwarding call");
        self.forward_call(&backend, req.body).await
    }

    /// Looks up the backend port with GETPORT and returns `host:port`.
    pub async fn resolve_backend(
        &self,
        prog: u32,
        vers: u32,
        server_hint: Option<&str>,
    ) -> Result<String, GatewayError> {
        let host = self
            .policy
            .backend_for(server_hint)
            .ok_or_else(|| GatewayError::Forbidden("no backend hosts allowed".into()))?;
        // the default backend uses the configured portmapper; other hosts use
        // the same portmapper port on that host
        let pm_addr = if Some(host) == self.policy.allowed_backends.first().map(String::as_str) {
            self.portmapper.clone()
        } else {
            let port = self
                .portmapper
                .rsplit_once(':')
                .and_then(|(_, p)| p.parse::<u16>().ok())
                .unwrap_or(111);
            host_port(host, port)
        };
        let pm = PortmapClient::with_timeout(pm_addr, self.portmap_timeout);
        let port = pm.getport(prog, vers, IPPROTO_TCP).await.map_err(GatewayError::Portmapper)?;
        if port == 0 {
            return Err(GatewayError::NotRegistered { prog, vers });
        }
        Ok(host_port(host, port as u16))
    }

    /// Writes the framed call verbatim and returns one framed reply exactly as received.
    pub async fn forward_call(&self, backend: &str, call_framed: &[u8]) -> Result<Vec<u8>, GatewayError> {
        self.stats.forwarded.fetch_add(1, Ordering::Relaxed);
        let timeout = self.backend_timeout;
        let mut stream = tokio::time::timeout(timeout, TcpStream::connect(backend))
            .await
            .map_err(|_| GatewayError::ConnectFailure(format!("{backend}: timed out")))?
            .map_err(|e| GatewayError::ConnectFailure(format!("{backend}: {e}")))?;
        let exchange = async {
            stream
                .write_all(call_framed)
                .await
                .map_err(|e| GatewayError::BackendIo(e.to_string()))?;
            match read_record_async(&mut stream, self.policy.max_record_bytes).await {
                Ok(Some(reply)) => Ok(reply.raw),
                Ok(None) => Err(GatewayError::BackendIo("backend closed without replying".into())),
                Err(RpcError::OversizeRecord { len, max }) => Err(GatewayError::ReplyOversize { len, max }),
                Err(e) => Err(GatewayError::BackendIo(e.to_string())),
            }
        };
        let reply = tokio::time::timeout(timeout, exchange)
            .await
            .map_err(|_| GatewayError::BackendIo("backend timed out".into()))??;
        debug!(%backend, request = %HexDump(call_framed), reply = %HexDump(&reply), "call forwarded");
        Ok(reply)
    }
}
