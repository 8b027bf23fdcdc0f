use std::time::Duration;

use super::{
    PortMapping, PortmapError, PMAPPROC_GETPORT, PMAPPROC_NULL, PMAPPROC_SET, PMAPPROC_UNSET,
    PMAP_PROG, PMAP_VERS,
};
use crate::rpc::client::{RpcConnection, XidGenerator};
use crate::rpc::{build_call, parse_reply_status, ReplyBody, RpcCallHeader};
use crate::xdr::XdrCursor;

pub const DEFAULT_PORTMAP_TIMEOUT: Duration = Duration::from_secs(5);

/// Client for a portmapper reachable over TCP. Each operation uses a fresh connection.
#[derive(Debug)]
pub struct PortmapClient {
    addr: String,
    timeout: Duration,
    xids: XidGenerator,
}

impl PortmapClient {
    pub fn new(addr: impl Into<String>) -> Self {
        Self::with_timeout(addr, DEFAULT_PORTMAP_TIMEOUT)
    }

    pub fn with_timeout(addr: impl Into<String>, timeout: Duration) -> Self {
        PortmapClient { addr: addr.into(), timeout, xids: XidGenerator::new() }
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    async fn call(&self, procedure: u32, args: &[u8]) -> Result<Vec<u8>, PortmapError> {
        let xid = self.xids.next();
        let call = build_call(&RpcCallHeader::new(xid, PMAP_PROG, PMAP_VERS, procedure), args)?;
        let unreachable = |reason: String| PortmapError::Unreachable { addr: self.addr.clone(), reason };
        let mut conn = RpcConnection::connect(&self.addr, self.timeout)
            .await
            .map_err(|e| unreachable(e.to_string()))?;
        let reply = conn.call(&call).await.map_err(|e| match e {
            crate::rpc::RpcError::Io(io) => unreachable(io.to_string()),
            other => other.into(),
        })?;
        let bytes = reply.record.as_bytes();
        let status = parse_reply_status(bytes)?;
        if status.xid != xid {
            return Err(PortmapError::ProtocolError(format!(
                "reply xid {:#x} does not match call xid {xid:#x}",
                status.xid
            )));
        }
        match status.body {
            ReplyBody::Accepted { stat: crate::rpc::AcceptStat::Success, .. } => {
                Ok(bytes[status.results_offset..].to_vec())
            }
            other => Err(PortmapError::ProtocolError(format!("call not accepted: {other:?}"))),
        }
    }

    async fn call_bool(&self, procedure: u32, args: &[u8]) -> Result<bool, PortmapError> {
        let res = self.call(procedure, args).await?;
        Ok(XdrCursor::new(&res).decode_u32()? != 0)
    }

    pub async fn null(&self) -> Result<(), PortmapError> {
        self.call(PMAPPROC_NULL, &[]).await.map(|_| ())
    }

    /// The registered port, or 0 when nothing is registered for the tuple.
    pub async fn getport(&self, prog: u32, vers: u32, proto: u32) -> Result<u32, PortmapError> {
        let mut args = Vec::with_capacity(16);
        PortMapping { prog, vers, proto, port: 0 }.encode(&mut args);
        let res = self.call(PMAPPROC_GETPORT, &args).await?;
        let port = XdrCursor::new(&res).decode_u32()?;
        if port > u16::MAX as u32 {
            return Err(PortmapError::ProtocolError(format!("port {port} out of range")));
        }
        Ok(port)
    }

    /// Registers a mapping; `Ok(false)` means the portmapper refused it.
    pub async fn set_mapping(&self, mapping: &PortMapping) -> Result<bool, PortmapError> {
        if mapping.port == 0 || mapping.port > u16::MAX as u32 {
            return Err(PortmapError::ProtocolError(format!(
                "cannot register port {}",
                mapping.port
            )));
        }
        let mut args = Vec::with_capacity(16);
        mapping.encode(&mut args);
        self.call_bool(PMAPPROC_SET, &args).await
    }

    /// Removes every mapping for (prog, vers). Protocol and port are ignored by the server.
    pub async fn unset_mapping(&self, prog: u32, vers: u32) -> Result<bool, PortmapError> {
        let mut args = Vec::with_capacity(16);
        PortMapping { prog, vers, proto: 0, port: 0 }.encode(&mut args);
        self.call_bool(PMAPPROC_UNSET, &args).await
    }
}
