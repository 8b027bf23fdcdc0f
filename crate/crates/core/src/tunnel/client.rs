//! HTTP(S) client that POSTs framed RPC calls to the gateway, reusing
//! keep-alive connections across calls.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use bytes::Bytes;
use http_body_util::{BodyExt, Full, Limited};
use hyper::client::conn::http1::{self, SendRequest};
use hyper::header::{HeaderValue, CONTENT_LENGTH, CONTENT_TYPE, HOST};
use hyper::{Method, Request};
use hyper_util::rt::TokioIo;
use rustls::pki_types::ServerName;
use tokio::io::{AsyncRead, AsyncWrite};
use tokio::net::TcpStream;
use tokio_rustls::TlsConnector;
use tracing::debug;
use url::Url;

use super::TunnelError;
use crate::gateway::{CONTENT_TYPE_OCTET_STREAM, CONTENT_TYPE_STREAM, RPC_PATH, SERVER_HINT_HEADER};
use crate::tcpfilter::host_port;
use crate::tls::ClientTlsOptions;

/// Carries the legacy `application/stream` media type alongside the standard one.
pub const LEGACY_CONTENT_TYPE_HEADER: &str = "x-paper-content-type";

type Sender = SendRequest<Full<Bytes>>;

fn classify_connect_error(e: std::io::Error) -> TunnelError {
    match e.get_ref().and_then(|inner| inner.downcast_ref::<rustls::Error>()) {
        Some(tls) => TunnelError::TlsVerificationFailure(tls.to_string()),
        None => TunnelError::GatewayUnreachable(e.to_string()),
    }
}

pub struct GatewayClient {
    authority: String,
    path: String,
    tls: Option<(TlsConnector, ServerName<'static>)>,
    server_hint: Option<HeaderValue>,
    timeout: Duration,
    max_body: usize,
    pool: Mutex<Vec<Sender>>,
    posts: AtomicU64,
    connections: AtomicU64,
}

impl GatewayClient {
    /// `url` must use http or https; TLS settings only apply to https.
    pub fn new(
        url: &Url,
        tls: &ClientTlsOptions,
        server_hint: Option<&str>,
        timeout: Duration,
        max_body: usize,
    ) -> Result<Self, TunnelError> {
        let host = url
            .host_str()
            .ok_or_else(|| TunnelError::Config(format!("gateway URL {url} has no host")))?;
        let bare_host = host.trim_start_matches('[').trim_end_matches(']');
        let port = url
            .port_or_known_default()
            .ok_or_else(|| TunnelError::Config(format!("gateway URL {url} has no port")))?;
        let tls = match url.scheme() {
            "https" => {
                let name = ServerName::try_from(bare_host.to_string())
                    .map_err(|e| TunnelError::Config(format!("bad TLS server name {bare_host:?}: {e}")))?;
                Some((TlsConnector::from(tls.build()?), name))
            }
            "http" => None,
            other => return Err(TunnelError::Config(format!("unsupported URL scheme {other:?}"))),
        };
        let path = match url.path() {
            "" | "/" => RPC_PATH.to_string(),
            p => p.to_string(),
        };
        let server_hint = server_hint
            .map(|h| {
                HeaderValue::from_str(h)
                    .map_err(|_| TunnelError::Config(format!("invalid server address {h:?}")))
            })
            .transpose()?;
        Ok(GatewayClient {
            authority: host_port(bare_host, port),
            path,
            tls,
            server_hint,
            timeout,
            max_body,
            pool: Mutex::default(),
            posts: AtomicU64::new(0),
            connections: AtomicU64::new(0),
        })
    }

    /// Number of POST requests issued so far.
    pub fn posts(&self) -> u64 {
        self.posts.load(Ordering::Relaxed)
    }

    /// Number of connections opened to the gateway so far.
    pub fn connections(&self) -> u64 {
        self.connections.load(Ordering::Relaxed)
    }

    async fn handshake<S>(io: S) -> Result<Sender, TunnelError>
    where
        S: AsyncRead + AsyncWrite + Unpin + Send + 'static,
    {
        let (sender, conn) = http1::handshake(TokioIo::new(io))
            .await
            .map_err(|e| TunnelError::GatewayUnreachable(e.to_string()))?;
        tokio::spawn(async move {
            if let Err(e) = conn.await {
                debug!("gateway connection ended: {e}");
            }
        });
        Ok(sender)
    }

    async fn connect(&self) -> Result<Sender, TunnelError> {
        let tcp = TcpStream::connect(&self.authority)
            .await
            .map_err(|e| TunnelError::GatewayUnreachable(format!("{}: {e}", self.authority)))?;
        tcp.set_nodelay(true).ok();
        self.connections.fetch_add(1, Ordering::Relaxed);
        match &self.tls {
            Some((connector, name)) => {
                let stream = connector.connect(name.clone(), tcp).await.map_err(classify_connect_error)?;
                Self::handshake(stream).await
            }
            None => Self::handshake(tcp).await,
        }
    }

    async fn pooled(&self) -> Option<Sender> {
        loop {
            let mut sender = self.pool.lock().unwrap().pop()?;
            if sender.ready().await.is_ok() {
                return Some(sender);
            }
        }
    }

    fn request(&self, body: Bytes) -> Request<Full<Bytes>> {
        let len = body.len();
        let mut req = Request::new(Full::new(body));
        *req.method_mut() = Method::POST;
        *req.uri_mut() = self.path.parse().expect("path validated by Url");
        let h = req.headers_mut();
        h.insert(HOST, HeaderValue::from_str(&self.authority).expect("authority is ASCII"));
        h.insert(CONTENT_TYPE, HeaderValue::from_static(CONTENT_TYPE_OCTET_STREAM));
        h.insert(LEGACY_CONTENT_TYPE_HEADER, HeaderValue::from_static(CONTENT_TYPE_STREAM));
        h.insert(CONTENT_LENGTH, HeaderValue::from(len));
        if let Some(hint) = &self.server_hint {
            h.insert(SERVER_HINT_HEADER, hint.clone());
        }
        req
    }

    /// POSTs `body` and returns the response body of a 200 reply.
    pub async fn post(&self, body: Bytes) -> Result<Bytes, TunnelError> {
        tokio::time::timeout(self.timeout, self.post_inner(body))
            .await
            .map_err(|_| TunnelError::GatewayUnreachable("gateway request timed out".into()))?
    }

    async fn post_inner(&self, body: Bytes) -> Result<Bytes, TunnelError> {
        let mut req = self.request(body);
        let (mut sender, mut reused) = match self.pooled().await {
            Some(s) => (s, true),
            None => (self.connect().await?, false),
        };
        let resp = loop {
            match sender.try_send_request(req).await {
                Ok(resp) => break resp,
                Err(mut e) => match e.take_message() {
                    // a pooled connection went stale before the request left; retry once fresh
                    Some(unsent) if reused => {
                        debug!("stale gateway connection: {}", e.error());
                        req = unsent;
                        sender = self.connect().await?;
                        reused = false;
                    }
                    _ => return Err(TunnelError::GatewayUnreachable(e.error().to_string())),
                },
            }
        };
        self.posts.fetch_add(1, Ordering::Relaxed);
        let status = resp.status();
        let body = Limited::new(resp.into_body(), self.max_body)
            .collect()
            .await
            .map_err(|e| TunnelError::GatewayUnreachable(format!("reading response: {e}")))?
            .to_bytes();
        if !sender.is_closed() {
            self.pool.lock().unwrap().push(sender);
        }
        if status.as_u16() != 200 {
            return Err(TunnelError::GatewayHttpError(status.as_u16()));
        }
        Ok(body)
    }
}
