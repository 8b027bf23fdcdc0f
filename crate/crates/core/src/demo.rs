//! A toy RPC program (300100, version 1) standing in for a real service.
//!
//! Procedures: NULL (0), ECHO (1) opaque → opaque, ADD (2) (u32, u32) → u32
//! with wrapping arithmetic.

use std::net::SocketAddr;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;
use tokio::net::TcpListener;
use tokio_util::sync::CancellationToken;
use tracing::{info, warn};

use crate::portmap::{PortMapping, PortmapClient, PortmapError, IPPROTO_TCP};
use crate::rpc::client::{RpcConnection, XidGenerator};
use crate::rpc::server::{serve_program, ProcResult, RpcProgram};
use crate::rpc::{
    build_call, parse_reply_status, AcceptStat, FramedRecord, ReplyBody, RpcCallHeader, RpcError,
};
use crate::xdr::{self, XdrCursor};

pub const DEMO_PROG: u32 = 300_100;
pub const DEMO_VERS: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DemoProc {
    Null = 0,
    Echo = 1,
    Add = 2,
}

impl FromStr for DemoProc {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "null" => Ok(DemoProc::Null),
            "echo" => Ok(DemoProc::Echo),
            "add" => Ok(DemoProc::Add),
            _ => Err(format!("unknown procedure {s:?} (expected null, echo or add)")),
        }
    }
}

pub fn encode_add_args(a: u32, b: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(8);
    xdr::put_u32(&mut out, a);
    xdr::put_u32(&mut out, b);
    out
}

#[derive(Debug, Default)]
pub struct DemoProgram {
    calls: AtomicU64,
}

impl DemoProgram {
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl RpcProgram for DemoProgram {
    fn program(&self) -> u32 {
        DEMO_PROG
    }

    fn versions(&self) -> (u32, u32) {
        (DEMO_VERS, DEMO_VERS)
    }

    fn call(&self, _vers: u32, procedure: u32, args: &[u8], _peer: SocketAddr) -> ProcResult {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut cur = XdrCursor::new(args);
        match procedure {
            0 => ProcResult::Success(Vec::new()),
            1 => match cur.decode_opaque_var() {
                Ok(data) => ProcResult::Success(xdr::encode_opaque_var(data)),
                Err(_) => ProcResult::GarbageArgs,
            },
            2 => match (cur.decode_u32(), cur.decode_u32()) {
                (Ok(a), Ok(b)) => ProcResult::Success(xdr::encode_u32(a.wrapping_add(b)).to_vec()),
                _ => ProcResult::GarbageArgs,
            },
            _ => ProcResult::ProcUnavail,
        }
    }
}

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("call rejected: {0:?}")]
    CallRejected(ReplyBody),
    #[error("reply xid {got:#x} does not match call xid {want:#x}")]
    XidMismatch { want: u32, got: u32 },
    #[error("malformed result: {0}")]
    BadResult(String),
    #[error("program {DEMO_PROG} version {DEMO_VERS} is not registered with the portmapper")]
    NotRegistered,
    #[error("registration with the portmapper was refused")]
    RegistrationFailure,
    #[error("transport: {0}")]
    Transport(#[from] RpcError),
    #[error(transparent)]
    Portmap(#[from] PortmapError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub struct DemoServer {
    listener: TcpListener,
    program: Arc<DemoProgram>,
}

impl DemoServer {
    pub async fn bind(addr: &str) -> std::io::Result<Self> {
        Ok(DemoServer { listener: TcpListener::bind(addr).await?, program: Arc::default() })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn program(&self) -> Arc<DemoProgram> {
        Arc::clone(&self.program)
    }

    pub async fn run(self, shutdown: CancellationToken) -> std::io::Result<()> {
        serve_program(self.listener, self.program, shutdown).await
    }
}

/// Binds, registers (300100, 1, TCP) with the portmapper, serves until
/// `shutdown`, then removes the registration.
pub async fn run_demo_server(
    listen: &str,
    portmapper: &str,
    shutdown: CancellationToken,
) -> Result<(), DemoError> {
    let server = DemoServer::bind(listen).await?;
    let port = server.local_addr()?.port() as u32;
    let pm = PortmapClient::new(portmapper);
    if !pm.set_mapping(&PortMapping::tcp(DEMO_PROG, DEMO_VERS, port)).await? {
        return Err(DemoError::RegistrationFailure);
    }
    info!(port, "demo server registered");
    let res = server.run(shutdown).await;
    if let Err(e) = pm.unset_mapping(DEMO_PROG, DEMO_VERS).await {
        warn!("unregistering demo program failed: {e}");
    }
    Ok(res?)
}

/// A client session: one TCP connection, unique xids.
pub struct DemoClient {
    conn: RpcConnection,
    xids: XidGenerator,
}

impl DemoClient {
    pub async fn connect(addr: &str, timeout: Duration) -> Result<Self, DemoError> {
        Ok(DemoClient { conn: RpcConnection::connect(addr, timeout).await?, xids: XidGenerator::new() })
    }

    /// Looks the program up with the portmapper at `portmapper` and connects
    /// to the returned port on the same host.
    pub async fn via_portmapper(portmapper: &str, timeout: Duration) -> Result<Self, DemoError> {
        let port = PortmapClient::with_timeout(portmapper, timeout)
            .getport(DEMO_PROG, DEMO_VERS, IPPROTO_TCP)
            .await?;
        if port == 0 {
            return Err(DemoError::NotRegistered);
        }
        let host = portmapper.rsplit_once(':').map_or(portmapper, |(h, _)| h);
        Self::connect(&format!("{host}:{port}"), timeout).await
    }

    pub fn next_xid(&self) -> u32 {
        self.xids.next()
    }

    /// Sends one call with a caller-chosen xid and returns the reply exactly as received.
    pub async fn call_raw(
        &mut self,
        xid: u32,
        vers: u32,
        procedure: u32,
        args: &[u8],
    ) -> Result<FramedRecord, DemoError> {
        let call = build_call(&RpcCallHeader::new(xid, DEMO_PROG, vers, procedure), args)?;
        Ok(self.conn.call(&call).await?)
    }

    /// Calls a procedure of the given version and returns the result bytes.
    pub async fn call_version(
        &mut self,
        vers: u32,
        procedure: u32,
        args: &[u8],
    ) -> Result<Vec<u8>, DemoError> {
        let xid = self.next_xid();
        let reply = self.call_raw(xid, vers, procedure, args).await?;
        let bytes = reply.record.as_bytes();
        let status = parse_reply_status(bytes)?;
        if status.xid != xid {
            return Err(DemoError::XidMismatch { want: xid, got: status.xid });
        }
        match status.body {
            ReplyBody::Accepted { stat: AcceptStat::Success, .. } => {
                Ok(bytes[status.results_offset..].to_vec())
            }
            other => Err(DemoError::CallRejected(other)),
        }
    }

    pub async fn call(&mut self, procedure: DemoProc, args: &[u8]) -> Result<Vec<u8>, DemoError> {
        self.call_version(DEMO_VERS, procedure as u32, args).await
    }

    pub async fn null(&mut self) -> Result<(), DemoError> {
        self.call(DemoProc::Null, &[]).await.map(|_| ())
    }

    pub async fn echo(&mut self, data: &[u8]) -> Result<Vec<u8>, DemoError> {
        let res = self.call(DemoProc::Echo, &xdr::encode_opaque_var(data)).await?;
        let mut cur = XdrCursor::new(&res);
        cur.decode_opaque_var()
            .map(<[u8]>::to_vec)
            .map_err(|e| DemoError::BadResult(e.to_string()))
    }

    pub async fn add(&mut self, a: u32, b: u32) -> Result<u32, DemoError> {
        let res = self.call(DemoProc::Add, &encode_add_args(a, b)).await?;
        XdrCursor::new(&res).decode_u32().map_err(|e| DemoError::BadResult(e.to_string()))
    }
}

/// One-shot call against `addr`: connect, call, return the result bytes.
pub async fn demo_call(addr: &str, procedure: DemoProc, args: &[u8]) -> Result<Vec<u8>, DemoError> {
    let mut client = DemoClient::connect(addr, Duration::from_secs(10)).await?;
    client.call(procedure, args).await
}
