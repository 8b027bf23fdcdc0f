//! Client side of the tunnel (`rpcfilter`).
//!
//! The filter binds a local TCP port and registers it with the local
//! portmapper under the tunnelled program's number and versions, so local RPC
//! clients find it exactly where they would find the real service. Each call
//! record read from a local connection is POSTed to the gateway and the
//! response body is written back unchanged.

mod client;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use thiserror::Error;
use tokio::io::AsyncWriteExt;
use tokio::net::{TcpListener, TcpStream};
use tokio_util::sync::CancellationToken;
use tracing::{debug, info, warn};
use url::Url;

use crate::portmap::{PortMapping, PortmapClient, PortmapError};
use crate::rpc::{
    parse_call_target, parse_reply_status, read_record, read_record_async, FramedRecord, HexDump, RpcError,
    DEFAULT_MAX_RECORD,
};
use crate::tls::{ClientTlsOptions, TlsConfigError};

pub use client::{GatewayClient, LEGACY_CONTENT_TYPE_HEADER};

pub const DEFAULT_REQUEST_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum TunnelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tls(#[from] TlsConfigError),
    #[error("gateway unreachable: {0}")]
    GatewayUnreachable(String),
    #[error("gateway answered HTTP {0}")]
    GatewayHttpError(u16),
    #[error("gateway certificate rejected: {0}")]
    TlsVerificationFailure(String),
    #[error("reply xid {got:#x} does not match call xid {want:#x}")]
    XidMismatch { want: u32, got: u32 },
    #[error("bad reply from gateway: {0}")]
    BadReply(String),
    #[error("bad call from local client: {0}")]
    BadCall(RpcError),
    #[error("portmapper refused registration of program {prog} version {vers}")]
    RegistrationFailure { prog: u32, vers: u32 },
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: SocketAddr, source: std::io::Error },
    #[error(transparent)]
    Portmap(#[from] PortmapError),
    #[error("local connection: {0}")]
    LocalIo(std::io::Error),
}

#[derive(Debug, Clone)]
pub struct TunnelEndpointConfig {
    pub gateway_url: Url,
    /// Remote RPC server host, forwarded to the gateway as a routing hint.
    pub server_address: String,
    pub prog: u32,
    pub versions: Vec<u32>,
    pub portmapper: String,
    /// Local address to listen on; port 0 picks an ephemeral port.
    pub listen: SocketAddr,
    pub tls: ClientTlsOptions,
    pub max_record_bytes: usize,
    pub request_timeout: Duration,
}

impl TunnelEndpointConfig {
    pub fn new(gateway_url: Url, server_address: impl Into<String>, prog: u32, versions: Vec<u32>) -> Self {
        TunnelEndpointConfig {
            gateway_url,
            server_address: server_address.into(),
            prog,
            versions,
            portmapper: "127.0.0.1:111".into(),
            listen: SocketAddr::from(([127, 0, 0, 1], 0)),
            tls: ClientTlsOptions::default(),
            max_record_bytes: DEFAULT_MAX_RECORD,
            request_timeout: DEFAULT_REQUEST_TIMEOUT,
        }
    }

    pub fn validate(&self) -> Result<(), TunnelError> {
        if self.versions.is_empty() {
            return Err(TunnelError::Config("at least one version is required".into()));
        }
        match self.gateway_url.scheme() {
            "https" => Ok(()),
            "http" if self.tls.insecure_skip_verify => Ok(()),
            "http" => Err(TunnelError::Config(
                "plain http gateway URLs require the insecure flag".into(),
            )),
            other => Err(TunnelError::Config(format!("unsupported URL scheme {other:?}"))),
        }
    }

    pub fn gateway_client(&self) -> Result<GatewayClient, TunnelError> {
        GatewayClient::new(
            &self.gateway_url,
            &self.tls,
            Some(&self.server_address),
            self.request_timeout,
            self.max_record_bytes.saturating_mul(5).saturating_add(4),
        )
    }
}

/// One request/response cycle: POST the framed call, check the framed reply.
///
/// Returns the response body unchanged; it is a single framed reply record
/// whose xid matches the call.
pub async fn tunnel_call(
    client: &GatewayClient,
    call: &FramedRecord,
    max_record: usize,
) -> Result<Bytes, TunnelError> {
    let target = parse_call_target(call.record.as_bytes()).map_err(TunnelError::BadCall)?;
    let body = client.post(Bytes::copy_from_slice(&call.raw)).await?;
    let mut rest = &body[..];
    let reply = read_record(&mut rest, max_record).map_err(|e| TunnelError::BadReply(e.to_string()))?;
    if !rest.is_empty() {
        return Err(TunnelError::BadReply(format!("{} trailing bytes after reply", rest.len())));
    }
    let status = parse_reply_status(reply.record.as_bytes()).map_err(|e| TunnelError::BadReply(e.to_string()))?;
    if status.xid != target.xid {
        return Err(TunnelError::XidMismatch { want: target.xid, got: status.xid });
    }
    debug!(xid = target.xid, call = %HexDump(&call.raw), reply = %HexDump(&body), "tunnelled call");
    Ok(body)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SessionStats {
    pub calls: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
}

/// Serves one local connection: calls are handled strictly one at a time.
pub struct TunnelSession {
    local: TcpStream,
    client: Arc<GatewayClient>,
    max_record: usize,
}

impl TunnelSession {
    pub fn new(local: TcpStream, client: Arc<GatewayClient>, max_record: usize) -> Self {
        TunnelSession { local, client, max_record }
    }

    /// Runs until the local client closes. Any error ends the session and
    /// closes the local connection.
    pub async fn serve(mut self) -> Result<SessionStats, TunnelError> {
        let mut stats = SessionStats::default();
        loop {
            let call = match read_record_async(&mut self.local, self.max_record).await {
                Ok(Some(c)) => c,
                Ok(None) => return Ok(stats),
                Err(RpcError::Io(e)) => return Err(TunnelError::LocalIo(e)),
                Err(e) => return Err(TunnelError::BadCall(e)),
            };
            let reply = tunnel_call(&self.client, &call, self.max_record).await?;
            self.local.write_all(&reply).await.map_err(TunnelError::LocalIo)?;
            stats.calls += 1;
            stats.bytes_in += call.raw.len() as u64;
            stats.bytes_out += reply.len() as u64;
        }
    }
}

/// A bound, registered tunnel endpoint.
pub struct RpcFilter {
    listener: TcpListener,
    config: TunnelEndpointConfig,
    client: Arc<GatewayClient>,
    portmap: PortmapClient,
    registered: Vec<u32>,
}

impl RpcFilter {
    /// Validates the config, binds the listen port, and registers every
    /// configured version with the portmapper. A refused registration undoes
    /// the ones already made.
    pub async fn start(config: TunnelEndpointConfig) -> Result<Self, TunnelError> {
        config.validate()?;
        let client = Arc::new(config.gateway_client()?);
        let listener = TcpListener::bind(config.listen)
            .await
            .map_err(|source| TunnelError::BindFailure { addr: config.listen, source })?;
        let port = listener.local_addr().map_err(TunnelError::LocalIo)?.port() as u32;
        let mut filter = RpcFilter {
            listener,
            portmap: PortmapClient::new(config.portmapper.clone()),
            config,
            client,
            registered: Vec::new(),
        };
        for &vers in &filter.config.versions.clone() {
            let mapping = PortMapping::tcp(filter.config.prog, vers, port);
            let ok = match filter.portmap.set_mapping(&mapping).await {
                Ok(ok) => ok,
                Err(e) => {
                    filter.unregister().await;
                    return Err(e.into());
                }
            };
            if !ok {
                filter.unregister().await;
                return Err(TunnelError::RegistrationFailure { prog: filter.config.prog, vers });
            }
            filter.registered.push(vers);
        }
        info!(
            prog = filter.config.prog,
            versions = ?filter.config.versions,
            port,
            gateway = %filter.config.gateway_url,
            "rpcfilter registered"
        );
        Ok(filter)
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn client(&self) -> Arc<GatewayClient> {
        Arc::clone(&self.client)
    }

    async fn unregister(&mut self) {
        for vers in std::mem::take(&mut self.registered) {
            match self.portmap.unset_mapping(self.config.prog, vers).await {
                Ok(true) => {}
                Ok(false) => warn!(prog = self.config.prog, vers, "mapping already gone"),
                Err(e) => warn!(prog = self.config.prog, vers, "unset failed: {e}"),
            }
        }
    }

    /// Serves local connections concurrently until `shutdown`, then removes
    /// the portmapper registrations.
    pub async fn run(mut self, shutdown: CancellationToken) -> Result<(), TunnelError> {
        loop {
            let (stream, peer) = tokio::select! {
                _ = shutdown.cancelled() => break,
                res = self.listener.accept() => match res {
                    Ok(x) => x,
                    Err(e) => {
                        warn!("accept failed: {e}");
                        continue;
                    }
                },
            };
            stream.set_nodelay(true).ok();
            let session = TunnelSession::new(stream, Arc::clone(&self.client), self.config.max_record_bytes);
            let shutdown = shutdown.clone();
            tokio::spawn(async move {
                tokio::select! {
                    _ = shutdown.cancelled() => {}
                    res = session.serve() => match res {
                        Ok(st) => debug!(%peer, calls = st.calls, "session closed"),
                        Err(e) => warn!(%peer, "session ended: {e}"),
                    }
                }
            });
        }
        self.unregister().await;
        Ok(())
    }
}

/// Starts the filter and serves until `shutdown`.
pub async fn run_rpcfilter(config: TunnelEndpointConfig, shutdown: CancellationToken) -> Result<(), TunnelError> {
    RpcFilter::start(config).await?.run(shutdown).await
}
