//! Generic bidirectional TCP relay: a server to its clients and a client to
//! its destination. Bytes are never inspected or modified.

use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use tokio::io::{copy_bidirectional_with_sizes, AsyncRead, AsyncWrite};
use tokio::net::{TcpListener, TcpStream};
use tokio_util::sync::CancellationToken;
use tracing::{debug, info, warn};

pub const RELAY_BUFFER_SIZE: usize = 16 * 1024;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RelayStats {
    pub client_to_server: u64,
    pub server_to_client: u64,
}

/// Pumps bytes both ways until each direction has seen end-of-stream.
///
/// End-of-stream on one side shuts down the write half of the other, so a
/// half-closed direction does not stop the opposite one. Any I/O error ends
/// the whole session.
pub async fn relay<C, S>(client: &mut C, server: &mut S) -> io::Result<RelayStats>
where
    C: AsyncRead + AsyncWrite + Unpin + ?Sized,
    S: AsyncRead + AsyncWrite + Unpin + ?Sized,
{
    let (c2s, s2c) =
        copy_bidirectional_with_sizes(client, server, RELAY_BUFFER_SIZE, RELAY_BUFFER_SIZE).await?;
    Ok(RelayStats { client_to_server: c2s, server_to_client: s2c })
}

/// Joins a host and port, bracketing bare IPv6 literals.
pub fn host_port(host: &str, port: u16) -> String {
    if host.contains(':') && !host.starts_with('[') {
        format!("[{host}]:{port}")
    } else {
        format!("{host}:{port}")
    }
}

#[derive(Debug, Default)]
pub struct FilterCounters {
    pub sessions: AtomicU64,
    pub connect_failures: AtomicU64,
}

pub struct TcpFilter {
    listener: TcpListener,
    destination: String,
    counters: Arc<FilterCounters>,
}

impl TcpFilter {
    pub async fn bind(listen: &str, destination: impl Into<String>) -> io::Result<Self> {
        Ok(TcpFilter {
            listener: TcpListener::bind(listen).await?,
            destination: destination.into(),
            counters: Arc::default(),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn counters(&self) -> Arc<FilterCounters> {
        Arc::clone(&self.counters)
    }

    /// Accepts clients until `shutdown` fires, relaying each on its own task.
    pub async fn run(self, shutdown: CancellationToken) -> io::Result<()> {
        info!(listen = %self.listener.local_addr()?, destination = %self.destination, "tcpfilter running");
        let destination: Arc<str> = self.destination.into();
        loop {
            let (mut client, peer) = tokio::select! {
                _ = shutdown.cancelled() => return Ok(()),
                res = self.listener.accept() => match res {
                    Ok(x) => x,
                    Err(e) => {
                        warn!("accept failed: {e}");
                        continue;
                    }
                },
            };
            let destination = Arc::clone(&destination);
            let counters = Arc::clone(&self.counters);
            let shutdown = shutdown.clone();
            tokio::spawn(async move {
                let mut server = match TcpStream::connect(&*destination).await {
                    Ok(s) => s,
                    Err(e) => {
                        counters.connect_failures.fetch_add(1, Ordering::Relaxed);
                        warn!(%peer, %destination, "connect failed: {e}");
                        return;
                    }
                };
                counters.sessions.fetch_add(1, Ordering::Relaxed);
                tokio::select! {
                    _ = shutdown.cancelled() => {}
                    res = relay(&mut client, &mut server) => match res {
                        Ok(st) => debug!(%peer, c2s = st.client_to_server, s2c = st.server_to_client, "session done"),
                        Err(e) => debug!(%peer, "session ended: {e}"),
                    }
                }
            });
        }
    }
}

/// Listens on every interface at `source_port` and relays to `destination_host:destination_port`.
pub async fn run_tcpfilter(
    source_port: u16,
    destination_host: &str,
    destination_port: u16,
    shutdown: CancellationToken,
) -> io::Result<()> {
    let filter = TcpFilter::bind(
        &format!("0.0.0.0:{source_port}"),
        host_port(destination_host, destination_port),
    )
    .await?;
    filter.run(shutdown).await
}
