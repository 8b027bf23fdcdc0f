//! Record-marked RPC over a plain TCP connection.

use std::sync::atomic::{AtomicU32, Ordering};
use std::time::Duration;

use tokio::io::AsyncWriteExt;
use tokio::net::TcpStream;

use super::message::RpcRecord;
use super::record::{frame_single, read_record_async, FramedRecord, DEFAULT_MAX_RECORD};
use super::RpcError;

/// Hands out transaction ids, starting from a random point.
#[derive(Debug)]
pub struct XidGenerator(AtomicU32);

impl XidGenerator {
    pub fn new() -> Self {
        XidGenerator(AtomicU32::new(rand::random()))
    }

    pub fn next(&self) -> u32 {
        self.0.fetch_add(1, Ordering::Relaxed)
    }
}

impl Default for XidGenerator {
    fn default() -> Self {
        Self::new()
    }
}

/// One TCP connection to an RPC server.
#[derive(Debug)]
pub struct RpcConnection {
    stream: TcpStream,
    timeout: Duration,
    max_record: usize,
}

impl RpcConnection {
    pub async fn connect(addr: &str, timeout: Duration) -> std::io::Result<Self> {
        let stream = tokio::time::timeout(timeout, TcpStream::connect(addr))
            .await
            .map_err(|_| std::io::Error::new(std::io::ErrorKind::TimedOut, "connect timed out"))??;
        stream.set_nodelay(true)?;
        Ok(RpcConnection { stream, timeout, max_record: DEFAULT_MAX_RECORD })
    }

    /// Sends one call as a single fragment and reads back one reply record.
    pub async fn call(&mut self, call: &RpcRecord) -> Result<FramedRecord, RpcError> {
        self.call_framed(&frame_single(call.as_bytes())).await
    }

    /// Writes already-framed bytes verbatim and reads back one reply record.
    pub async fn call_framed(&mut self, framed: &[u8]) -> Result<FramedRecord, RpcError> {
        let exchange = async {
            self.stream.write_all(framed).await.map_err(RpcError::Io)?;
            read_record_async(&mut self.stream, self.max_record).await?.ok_or(RpcError::Truncated)
        };
        tokio::time::timeout(self.timeout, exchange).await.map_err(|_| {
            RpcError::Io(std::io::Error::new(std::io::ErrorKind::TimedOut, "rpc call timed out"))
        })?
    }
}
