//! ONC RPC version 2 call and reply messages.

use super::RpcError;
use crate::xdr::{self, XdrCursor, XdrError};

pub const MSG_CALL: u32 = 0;
pub const MSG_REPLY: u32 = 1;
pub const RPC_VERSION: u32 = 2;

pub const AUTH_NONE: u32 = 0;
/// Largest credential or verifier body permitted on the wire.
pub const MAX_AUTH_BYTES: usize = 400;

const REPLY_ACCEPTED: u32 = 0;
const REPLY_DENIED: u32 = 1;

/// Smallest prefix holding xid, msg_type, rpcvers, prog, vers and proc.
pub const MIN_CALL_PREFIX: usize = 24;

/// One complete RPC message body, without record-marking framing.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RpcRecord(Vec<u8>);

impl RpcRecord {
    pub fn new(bytes: Vec<u8>) -> Self {
        RpcRecord(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<u8>> for RpcRecord {
    fn from(v: Vec<u8>) -> Self {
        RpcRecord(v)
    }
}

impl AsRef<[u8]> for RpcRecord {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OpaqueAuth {
    pub flavor: u32,
    pub body: Vec<u8>,
}

impl OpaqueAuth {
    pub fn none() -> Self {
        OpaqueAuth { flavor: AUTH_NONE, body: Vec::new() }
    }

    fn encode(&self, out: &mut Vec<u8>) -> Result<(), RpcError> {
        if self.body.len() > MAX_AUTH_BYTES {
            return Err(RpcError::AuthTooLong(self.body.len()));
        }
        xdr::put_u32(out, self.flavor);
        xdr::put_opaque_var(out, &self.body);
        Ok(())
    }

    fn decode(cur: &mut XdrCursor<'_>) -> Result<Self, RpcError> {
        let flavor = cur.decode_u32()?;
        let body = match cur.decode_opaque_var() {
            Ok(b) => b.to_vec(),
            Err(XdrError::OversizeField { len, .. }) => return Err(RpcError::AuthTooLong(len)),
            Err(e) => return Err(e.into()),
        };
        if body.len() > MAX_AUTH_BYTES {
            return Err(RpcError::AuthTooLong(body.len()));
        }
        Ok(OpaqueAuth { flavor, body })
    }
}

/// Header of an RPC call. `msg_type` and `rpcvers` are implied (CALL, 2).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RpcCallHeader {
    pub xid: u32,
    pub prog: u32,
    pub vers: u32,
    pub procedure: u32,
    pub cred: OpaqueAuth,
    pub verf: OpaqueAuth,
}

impl RpcCallHeader {
    /// A call header with AUTH_NONE credential and verifier.
    pub fn new(xid: u32, prog: u32, vers: u32, procedure: u32) -> Self {
        RpcCallHeader {
            xid,
            prog,
            vers,
            procedure,
            cred: OpaqueAuth::none(),
            verf: OpaqueAuth::none(),
        }
    }
}

/// Serializes a call header followed by `args` verbatim.
pub fn build_call(header: &RpcCallHeader, args: &[u8]) -> Result<RpcRecord, RpcError> {
    let mut out = Vec::with_capacity(40 + args.len());
    xdr::put_u32(&mut out, header.xid);
    xdr::put_u32(&mut out, MSG_CALL);
    xdr::put_u32(&mut out, RPC_VERSION);
    xdr::put_u32(&mut out, header.prog);
    xdr::put_u32(&mut out, header.vers);
    xdr::put_u32(&mut out, header.procedure);
    header.cred.encode(&mut out)?;
    header.verf.encode(&mut out)?;
    out.extend_from_slice(args);
    Ok(RpcRecord(out))
}

/// The routing fields of a call: enough to pick a backend without touching auth or args.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallTarget {
    pub xid: u32,
    pub prog: u32,
    pub vers: u32,
    pub procedure: u32,
}

/// Reads xid, prog, vers and proc from fixed offsets 0, 12, 16 and 20.
pub fn parse_call_target(record: &[u8]) -> Result<CallTarget, RpcError> {
    if record.len() < MIN_CALL_PREFIX {
        return Err(RpcError::Truncated);
    }
    let mut cur = XdrCursor::new(record);
    let xid = cur.decode_u32()?;
    let msg_type = cur.decode_u32()?;
    if msg_type != MSG_CALL {
        return Err(RpcError::NotACall(msg_type));
    }
    let rpcvers = cur.decode_u32()?;
    if rpcvers != RPC_VERSION {
        return Err(RpcError::BadRpcVersion(rpcvers));
    }
    Ok(CallTarget {
        xid,
        prog: cur.decode_u32()?,
        vers: cur.decode_u32()?,
        procedure: cur.decode_u32()?,
    })
}

/// Parses a full call header including auth; returns the header and the offset of the arguments.
pub fn parse_call(record: &[u8]) -> Result<(RpcCallHeader, usize), RpcError> {
    let target = parse_call_target(record)?;
    let mut cur = XdrCursor::new(record);
    for _ in 0..6 {
        cur.decode_u32()?;
    }
    let cred = OpaqueAuth::decode(&mut cur)?;
    let verf = OpaqueAuth::decode(&mut cur)?;
    let header = RpcCallHeader {
        xid: target.xid,
        prog: target.prog,
        vers: target.vers,
        procedure: target.procedure,
        cred,
        verf,
    };
    Ok((header, cur.offset()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcceptStat {
    Success,
    ProgUnavail,
    ProgMismatch { low: u32, high: u32 },
    ProcUnavail,
    GarbageArgs,
    SystemErr,
}

impl AcceptStat {
    pub fn code(&self) -> u32 {
        match self {
            AcceptStat::Success => 0,
            AcceptStat::ProgUnavail => 1,
            AcceptStat::ProgMismatch { .. } => 2,
            AcceptStat::ProcUnavail => 3,
            AcceptStat::GarbageArgs => 4,
            AcceptStat::SystemErr => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectStat {
    RpcMismatch { low: u32, high: u32 },
    AuthError(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplyBody {
    Accepted { verf: OpaqueAuth, stat: AcceptStat },
    Denied(RejectStat),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplyStatus {
    pub xid: u32,
    pub body: ReplyBody,
    /// Byte offset at which procedure results begin.
    pub results_offset: usize,
}

impl ReplyStatus {
    pub fn is_success(&self) -> bool {
        matches!(self.body, ReplyBody::Accepted { stat: AcceptStat::Success, .. })
    }
}

pub fn parse_reply_status(record: &[u8]) -> Result<ReplyStatus, RpcError> {
    if record.len() < 12 {
        return Err(RpcError::Truncated);
    }
    let mut cur = XdrCursor::new(record);
    let xid = cur.decode_u32()?;
    let msg_type = cur.decode_u32()?;
    if msg_type != MSG_REPLY {
        return Err(RpcError::NotAReply(msg_type));
    }
    let body = match cur.decode_u32()? {
        REPLY_ACCEPTED => {
            let verf = OpaqueAuth::decode(&mut cur)?;
            let stat = match cur.decode_u32()? {
                0 => AcceptStat::Success,
                1 => AcceptStat::ProgUnavail,
                2 => AcceptStat::ProgMismatch { low: cur.decode_u32()?, high: cur.decode_u32()? },
                3 => AcceptStat::ProcUnavail,
                4 => AcceptStat::GarbageArgs,
                5 => AcceptStat::SystemErr,
                other => return Err(RpcError::BadReply(format!("accept_stat {other}"))),
            };
            ReplyBody::Accepted { verf, stat }
        }
        REPLY_DENIED => match cur.decode_u32()? {
            0 => ReplyBody::Denied(RejectStat::RpcMismatch {
                low: cur.decode_u32()?,
                high: cur.decode_u32()?,
            }),
            1 => ReplyBody::Denied(RejectStat::AuthError(cur.decode_u32()?)),
            other => return Err(RpcError::BadReply(format!("reject_stat {other}"))),
        },
        other => return Err(RpcError::BadReply(format!("reply_stat {other}"))),
    };
    Ok(ReplyStatus { xid, body, results_offset: cur.offset() })
}

/// Builds an accepted reply. `results` is appended only for `Success`.
pub fn build_accepted_reply(xid: u32, stat: AcceptStat, results: &[u8]) -> RpcRecord {
    let mut out = Vec::with_capacity(24 + results.len());
    xdr::put_u32(&mut out, xid);
    xdr::put_u32(&mut out, MSG_REPLY);
    xdr::put_u32(&mut out, REPLY_ACCEPTED);
    xdr::put_u32(&mut out, AUTH_NONE);
    xdr::put_u32(&mut out, 0);
    xdr::put_u32(&mut out, stat.code());
    match stat {
        AcceptStat::Success => out.extend_from_slice(results),
        AcceptStat::ProgMismatch { low, high } => {
            xdr::put_u32(&mut out, low);
            xdr::put_u32(&mut out, high);
        }
        _ => {}
    }
    RpcRecord(out)
}

pub fn build_denied_reply(xid: u32, reject: RejectStat) -> RpcRecord {
    let mut out = Vec::with_capacity(24);
    xdr::put_u32(&mut out, xid);
    xdr::put_u32(&mut out, MSG_REPLY);
    xdr::put_u32(&mut out, REPLY_DENIED);
    match reject {
        RejectStat::RpcMismatch { low, high } => {
            xdr::put_u32(&mut out, 0);
            xdr::put_u32(&mut out, low);
            xdr::put_u32(&mut out, high);
        }
        RejectStat::AuthError(code) => {
            xdr::put_u32(&mut out, 1);
            xdr::put_u32(&mut out, code);
        }
    }
    RpcRecord(out)
}
