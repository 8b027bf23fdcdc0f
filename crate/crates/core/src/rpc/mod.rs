//! ONC RPC v2 messages, record-marking framing, and a small program dispatcher.

pub mod client;
pub mod message;
pub mod record;
pub mod server;

use std::io;

use thiserror::Error;

use crate::xdr::XdrError;

pub use message::{
    build_accepted_reply, build_call, build_denied_reply, parse_call, parse_call_target,
    parse_reply_status, AcceptStat, CallTarget, OpaqueAuth, RejectStat, ReplyBody, ReplyStatus,
    RpcCallHeader, RpcRecord,
};
pub use record::{
    frame_record, frame_single, read_record, read_record_async, reassemble_record, scan_record,
    FramedRecord, FragmentHeader, RecordExtent, DEFAULT_MAX_RECORD,
};

#[derive(Debug, Error)]
pub enum RpcError {
    #[error("truncated RPC data")]
    Truncated,
    #[error("message is not a call (msg_type {0})")]
    NotACall(u32),
    #[error("message is not a reply (msg_type {0})")]
    NotAReply(u32),
    #[error("unsupported RPC version {0}")]
    BadRpcVersion(u32),
    #[error("auth body of {0} bytes exceeds 400")]
    AuthTooLong(usize),
    #[error("malformed reply: {0}")]
    BadReply(String),
    #[error("record of {len} bytes exceeds limit of {max}")]
    OversizeRecord { len: usize, max: usize },
    #[error("zero-length non-final fragment")]
    EmptyFragment,
    #[error("oversize XDR field: {0}")]
    Field(XdrError),
    #[error(transparent)]
    Io(io::Error),
}

impl From<XdrError> for RpcError {
    fn from(e: XdrError) -> Self {
        match e {
            XdrError::Truncated { .. } => RpcError::Truncated,
            e @ XdrError::OversizeField { .. } => RpcError::Field(e),
        }
    }
}

/// Lazily formats up to 256 bytes as hex for debug logging.
pub struct HexDump<'a>(pub &'a [u8]);

impl std::fmt::Display for HexDump<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const MAX: usize = 256;
        for (i, b) in self.0.iter().take(MAX).enumerate() {
            if i > 0 && i % 4 == 0 {
                f.write_str(" ")?;
            }
            write!(f, "{b:02x}")?;
        }
        if self.0.len() > MAX {
            write!(f, " ...(+{})", self.0.len() - MAX)?;
        }
        Ok(())
    }
}
