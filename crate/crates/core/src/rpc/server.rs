//! Minimal record-marked TCP server for hosting an RPC program.

use std::net::SocketAddr;
use std::sync::Arc;

use tokio::io::AsyncWriteExt;
use tokio::net::{TcpListener, TcpStream};
use tokio_util::sync::CancellationToken;
use tracing::{debug, warn};

use super::message::{
    build_accepted_reply, build_denied_reply, parse_call, parse_call_target, AcceptStat, RejectStat,
    RpcRecord, RPC_VERSION,
};
use super::record::{frame_single, read_record_async, DEFAULT_MAX_RECORD};
use super::RpcError;

/// AUTH_BADCRED
const AUTH_BADCRED: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProcResult {
    Success(Vec<u8>),
    ProcUnavail,
    GarbageArgs,
    SystemErr,
}

/// An RPC program that can be served over TCP.
pub trait RpcProgram: Send + Sync + 'static {
    fn program(&self) -> u32;
    /// Lowest and highest supported version.
    fn versions(&self) -> (u32, u32);
    fn call(&self, vers: u32, procedure: u32, args: &[u8], peer: SocketAddr) -> ProcResult;
}

/// Produces the reply for one call record, or `None` when the record is not a
/// call at all and should be dropped.
pub fn dispatch<P: RpcProgram + ?Sized>(
    program: &P,
    record: &[u8],
    peer: SocketAddr,
) -> Option<RpcRecord> {
    let target = match parse_call_target(record) {
        Ok(t) => t,
        Err(RpcError::BadRpcVersion(_)) => {
            let xid = u32::from_be_bytes(record[..4].try_into().ok()?);
            return Some(build_denied_reply(
                xid,
                RejectStat::RpcMismatch { low: RPC_VERSION, high: RPC_VERSION },
            ));
        }
        Err(_) => return None,
    };
    let xid = target.xid;
    let args_offset = match parse_call(record) {
        Ok((_, off)) => off,
        Err(_) => return Some(build_denied_reply(xid, RejectStat::AuthError(AUTH_BADCRED))),
    };
    if target.prog != program.program() {
        return Some(build_accepted_reply(xid, AcceptStat::ProgUnavail, &[]));
    }
    let (low, high) = program.versions();
    if target.vers < low || target.vers > high {
        return Some(build_accepted_reply(xid, AcceptStat::ProgMismatch { low, high }, &[]));
    }
    let reply = match program.call(target.vers, target.procedure, &record[args_offset..], peer) {
        ProcResult::Success(results) => build_accepted_reply(xid, AcceptStat::Success, &results),
        ProcResult::ProcUnavail => build_accepted_reply(xid, AcceptStat::ProcUnavail, &[]),
        ProcResult::GarbageArgs => build_accepted_reply(xid, AcceptStat::GarbageArgs, &[]),
        ProcResult::SystemErr => build_accepted_reply(xid, AcceptStat::SystemErr, &[]),
    };
    Some(reply)
}

async fn serve_connection<P: RpcProgram + ?Sized>(
    program: &P,
    mut stream: TcpStream,
    peer: SocketAddr,
) -> Result<(), RpcError> {
    while let Some(framed) = read_record_async(&mut stream, DEFAULT_MAX_RECORD).await? {
        let Some(reply) = dispatch(program, framed.record.as_bytes(), peer) else {
            debug!(%peer, "dropping non-call record");
            continue;
        };
        stream.write_all(&frame_single(reply.as_bytes())).await.map_err(RpcError::Io)?;
    }
    Ok(())
}

/// Accepts connections until `shutdown` fires; each connection is handled on its own task.
pub async fn serve_program<P: RpcProgram + ?Sized>(
    listener: TcpListener,
    program: Arc<P>,
    shutdown: CancellationToken,
) -> std::io::Result<()> {
    loop {
        let (stream, peer) = tokio::select! {
            _ = shutdown.cancelled() => return Ok(()),
            res = listener.accept() => match res {
                Ok(x) => x,
                Err(e) => {
                    warn!("accept failed: {e}");
                    continue;
                }
            },
        };
        let program = Arc::clone(&program);
        let shutdown = shutdown.clone();
        tokio::spawn(async move {
            tokio::select! {
                _ = shutdown.cancelled() => {}
                res = serve_connection(&*program, stream, peer) => {
                    if let Err(e) = res {
                        debug!(%peer, "rpc connection closed: {e}");
                    }
                }
            }
        });
    }
}
