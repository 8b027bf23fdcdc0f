//! Portmapper version 2 (program 100000): client calls and an embedded server.

mod client;
mod registry;
mod server;

use thiserror::Error;

use crate::rpc::RpcError;
use crate::xdr::{self, XdrCursor, XdrError};

pub use client::{PortmapClient, DEFAULT_PORTMAP_TIMEOUT};
pub use registry::MappingRegistry;
pub use server::{PortmapProgram, PortmapServer, PortmapStats};

pub const PMAP_PROG: u32 = 100_000;
pub const PMAP_VERS: u32 = 2;

pub const PMAPPROC_NULL: u32 = 0;
pub const PMAPPROC_SET: u32 = 1;
pub const PMAPPROC_UNSET: u32 = 2;
pub const PMAPPROC_GETPORT: u32 = 3;
pub const PMAPPROC_DUMP: u32 = 4;
pub const PMAPPROC_CALLIT: u32 = 5;

pub const IPPROTO_TCP: u32 = 6;
pub const IPPROTO_UDP: u32 = 17;

#[derive(Debug, Error)]
pub enum PortmapError {
    #[error("portmapper {addr} unreachable: {reason}")]
    Unreachable { addr: String, reason: String },
    #[error("portmapper protocol error: {0}")]
    ProtocolError(String),
}

impl From<RpcError> for PortmapError {
    fn from(e: RpcError) -> Self {
        PortmapError::ProtocolError(e.to_string())
    }
}

impl From<XdrError> for PortmapError {
    fn from(e: XdrError) -> Self {
        PortmapError::ProtocolError(e.to_string())
    }
}

/// A (program, version, protocol) → port registration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PortMapping {
    pub prog: u32,
    pub vers: u32,
    pub proto: u32,
    pub port: u32,
}

impl PortMapping {
    pub fn tcp(prog: u32, vers: u32, port: u32) -> Self {
        PortMapping { prog, vers, proto: IPPROTO_TCP, port }
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        xdr::put_u32(out, self.prog);
        xdr::put_u32(out, self.vers);
        xdr::put_u32(out, self.proto);
        xdr::put_u32(out, self.port);
    }

    pub fn decode(cur: &mut XdrCursor<'_>) -> Result<Self, XdrError> {
        Ok(PortMapping {
            prog: cur.decode_u32()?,
            vers: cur.decode_u32()?,
            proto: cur.decode_u32()?,
            port: cur.decode_u32()?,
        })
    }
}
