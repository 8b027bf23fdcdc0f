use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use bytes::Bytes;
use http_body_util::{BodyExt, Full, LengthLimitError, Limited};
use hyper::body::Incoming;
use hyper::header::{HeaderValue, ALLOW, CONTENT_TYPE};
use hyper::server::conn::http1;
use hyper::service::service_fn;
use hyper::{Request, Response, StatusCode};
use hyper_util::rt::TokioIo;
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncWrite};
use tokio::net::TcpListener;
use tokio_rustls::TlsAcceptor;
use tokio_util::sync::CancellationToken;
use tracing::{debug, info, warn};

use super::{check_request_shape, Gateway, GatewayRequest, GatewayResponse};
use crate::tls::{TlsConfigError, TlsServerConfig};

pub const RPC_PATH: &str = "/rpc";
pub const SERVER_HINT_HEADER: &str = "x-rpc-server";

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: String, source: std::io::Error },
    #[error(transparent)]
    Tls(#[from] TlsConfigError),
}

fn to_hyper(r: GatewayResponse) -> Response<Full<Bytes>> {
    let status = r.status;
    let mut resp = Response::new(Full::new(Bytes::from(r.body)));
    *resp.status_mut() = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    resp.headers_mut().insert(CONTENT_TYPE, HeaderValue::from_static(r.content_type));
    if status == 405 {
        resp.headers_mut().insert(ALLOW, HeaderValue::from_static("POST"));
    }
    resp
}

async fn handle(
    gateway: Arc<Gateway>,
    peer: SocketAddr,
    req: Request<Incoming>,
) -> Result<Response<Full<Bytes>>, Infallible> {
    if req.uri().path() != RPC_PATH {
        return Ok(to_hyper(GatewayResponse::error(404, "not found")));
    }
    let content_type = match req.headers().get(CONTENT_TYPE) {
        Some(v) => Some(v.to_str().unwrap_or("invalid")),
        None => None,
    };
    if let Some(r) = check_request_shape(Some(req.method().as_str()), content_type) {
        return Ok(to_hyper(r));
    }
    let hint = req
        .headers()
        .get(SERVER_HINT_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_owned);
    let limit = gateway.policy().max_body_bytes();
    let body = match Limited::new(req.into_body(), limit).collect().await {
        Ok(c) => c.to_bytes(),
        Err(e) if e.downcast_ref::<LengthLimitError>().is_some() => {
            return Ok(to_hyper(gateway.too_large()));
        }
        Err(e) => return Ok(to_hyper(GatewayResponse::error(400, &format!("body: {e}")))),
    };
    let resp = gateway
        .handle_rpc_post(GatewayRequest {
            body: &body,
            client: Some(peer.ip()),
            server_hint: hint.as_deref(),
        })
        .await;
    Ok(to_hyper(resp))
}

async fn serve_http<S>(io: S, gateway: Arc<Gateway>, peer: SocketAddr)
where
    S: AsyncRead + AsyncWrite + Unpin + Send + 'static,
{
    let svc = service_fn(move |req| handle(Arc::clone(&gateway), peer, req));
    if let Err(e) = http1::Builder::new().serve_connection(TokioIo::new(io), svc).await {
        debug!(%peer, "http connection error: {e}");
    }
}

/// The embedded HTTP(S) front end for a [`Gateway`].
pub struct GatewayServer {
    listener: TcpListener,
    tls: Option<TlsAcceptor>,
    gateway: Arc<Gateway>,
    handshake_failures: Arc<AtomicU64>,
}

impl GatewayServer {
    pub async fn bind(
        addr: &str,
        tls: Option<&TlsServerConfig>,
        gateway: Arc<Gateway>,
    ) -> Result<Self, ServeError> {
        let tls = tls.map(|t| t.build().map(TlsAcceptor::from)).transpose()?;
        let listener = TcpListener::bind(addr)
            .await
            .map_err(|source| ServeError::BindFailure { addr: addr.to_string(), source })?;
        Ok(GatewayServer { listener, tls, gateway, handshake_failures: Arc::default() })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn gateway(&self) -> Arc<Gateway> {
        Arc::clone(&self.gateway)
    }

    /// Count of TLS handshakes that failed (including rejected client certificates).
    pub fn handshake_failures(&self) -> Arc<AtomicU64> {
        Arc::clone(&self.handshake_failures)
    }

    pub async fn run(self, shutdown: CancellationToken) -> std::io::Result<()> {
        info!(
            listen = %self.listener.local_addr()?,
            tls = self.tls.is_some(),
            "gateway serving POST {RPC_PATH}"
        );
        loop {
            let (stream, peer) = tokio::select! {
                _ = shutdown.cancelled() => return Ok(()),
                res = self.listener.accept() => match res {
                    Ok(x) => x,
                    Err(e) => {
                        warn!("accept failed: {e}");
                        continue;
                    }
                },
            };
            let gateway = Arc::clone(&self.gateway);
            let tls = self.tls.clone();
            let failures = Arc::clone(&self.handshake_failures);
            let shutdown = shutdown.clone();
            tokio::spawn(async move {
                let conn = async move {
                    match tls {
                        Some(acceptor) => match acceptor.accept(stream).await {
                            Ok(s) => serve_http(s, gateway, peer).await,
                            Err(e) => {
                                failures.fetch_add(1, Ordering::Relaxed);
                                debug!(%peer, "TLS handshake failed: {e}");
                            }
                        },
                        None => serve_http(stream, gateway, peer).await,
                    }
                };
                tokio::select! {
                    _ = shutdown.cancelled() => {}
                    _ = conn => {}
                }
            });
        }
    }
}
