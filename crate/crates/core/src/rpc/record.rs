//! Record marking: the TCP framing that delimits RPC messages on a byte stream.
//!
//! Each fragment is preceded by a big-endian u32 whose top bit flags the last
//! fragment of a record and whose low 31 bits give the fragment length.

use std::io::{self, Read};

use tokio::io::{AsyncRead, AsyncReadExt};

use super::message::RpcRecord;
use super::RpcError;

pub const LAST_FRAGMENT: u32 = 0x8000_0000;
pub const MAX_FRAGMENT_LEN: usize = 0x7FFF_FFFF;
/// Default cap on a reassembled record (1 MiB).
pub const DEFAULT_MAX_RECORD: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FragmentHeader {
    pub last: bool,
    pub len: u32,
}

impl FragmentHeader {
    pub fn encode(self) -> [u8; 4] {
        let mut v = self.len & !LAST_FRAGMENT;
        if self.last {
            v |= LAST_FRAGMENT;
        }
        v.to_be_bytes()
    }

    pub fn decode(bytes: [u8; 4]) -> Self {
        let v = u32::from_be_bytes(bytes);
        FragmentHeader { last: v & LAST_FRAGMENT != 0, len: v & !LAST_FRAGMENT }
    }
}

/// Frames `record` into fragments of at most `max_fragment` payload bytes.
///
/// Panics if `max_fragment` is zero.
pub fn frame_record(record: &[u8], max_fragment: usize) -> Vec<u8> {
    assert!(max_fragment >= 1, "max_fragment must be positive");
    let max_fragment = max_fragment.min(MAX_FRAGMENT_LEN);
    if record.is_empty() {
        return FragmentHeader { last: true, len: 0 }.encode().to_vec();
    }
    let nfrag = record.len().div_ceil(max_fragment);
    let mut out = Vec::with_capacity(record.len() + 4 * nfrag);
    let mut chunks = record.chunks(max_fragment).peekable();
    while let Some(chunk) = chunks.next() {
        let hdr = FragmentHeader { last: chunks.peek().is_none(), len: chunk.len() as u32 };
        out.extend_from_slice(&hdr.encode());
        out.extend_from_slice(chunk);
    }
    out
}

/// Frames `record` as a single last-flagged fragment.
pub fn frame_single(record: &[u8]) -> Vec<u8> {
    frame_record(record, MAX_FRAGMENT_LEN)
}

/// A record as read off the wire: the reassembled payload plus the exact
/// framed bytes it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FramedRecord {
    pub raw: Vec<u8>,
    pub record: RpcRecord,
}

struct Assembler {
    raw: Vec<u8>,
    payload: Vec<u8>,
    max_record: usize,
}

impl Assembler {
    fn new(max_record: usize) -> Self {
        Assembler { raw: Vec::new(), payload: Vec::new(), max_record }
    }

    /// Validates a header and returns the number of payload bytes to read next.
    fn header(&mut self, bytes: [u8; 4]) -> Result<(FragmentHeader, usize), RpcError> {
        let hdr = FragmentHeader::decode(bytes);
        let len = hdr.len as usize;
        if len == 0 && !hdr.last {
            return Err(RpcError::EmptyFragment);
        }
        let total = self.payload.len() + len;
        if total > self.max_record {
            return Err(RpcError::OversizeRecord { len: total, max: self.max_record });
        }
        self.raw.extend_from_slice(&bytes);
        Ok((hdr, len))
    }

    fn finish(self) -> FramedRecord {
        FramedRecord { raw: self.raw, record: RpcRecord::new(self.payload) }
    }
}

fn eof_as_truncated(e: io::Error) -> RpcError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        RpcError::Truncated
    } else {
        RpcError::Io(e)
    }
}

/// Reads exactly one record, consuming nothing past its last fragment.
pub fn read_record<R: Read>(reader: &mut R, max_record: usize) -> Result<FramedRecord, RpcError> {
    let mut asm = Assembler::new(max_record);
    loop {
        let mut hb = [0u8; 4];
        reader.read_exact(&mut hb).map_err(eof_as_truncated)?;
        let (hdr, len) = asm.header(hb)?;
        let start = asm.payload.len();
        asm.payload.resize(start + len, 0);
        reader.read_exact(&mut asm.payload[start..]).map_err(eof_as_truncated)?;
        asm.raw.extend_from_slice(&asm.payload[start..]);
        if hdr.last {
            return Ok(asm.finish());
        }
    }
}

/// Shape of the first record in an in-memory buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordExtent {
    /// Reassembled payload length.
    pub record_len: usize,
    /// Framed bytes the record occupies, headers included.
    pub framed_len: usize,
}

/// Walks the fragment headers at the start of `buf` without copying.
///
/// Fails with `Truncated` if any fragment runs past the end of `buf`, so a
/// bogus length is reported as truncation rather than as an oversize record.
pub fn scan_record(buf: &[u8]) -> Result<RecordExtent, RpcError> {
    let mut pos = 0usize;
    let mut record_len = 0usize;
    loop {
        let hb: [u8; 4] = buf.get(pos..pos + 4).ok_or(RpcError::Truncated)?.try_into().expect("4 bytes");
        let hdr = FragmentHeader::decode(hb);
        let len = hdr.len as usize;
        if len == 0 && !hdr.last {
            return Err(RpcError::EmptyFragment);
        }
        pos += 4;
        if buf.len() - pos < len {
            return Err(RpcError::Truncated);
        }
        pos += len;
        record_len += len;
        if hdr.last {
            return Ok(RecordExtent { record_len, framed_len: pos });
        }
    }
}

pub fn reassemble_record<R: Read>(reader: &mut R, max_record: usize) -> Result<RpcRecord, RpcError> {
    read_record(reader, max_record).map(|f| f.record)
}

/// Async counterpart of [`read_record`].
///
/// Returns `Ok(None)` when the stream ends cleanly before the first header byte.
pub async fn read_record_async<R: AsyncRead + Unpin>(
    reader: &mut R,
    max_record: usize,
) -> Result<Option<FramedRecord>, RpcError> {
    let mut asm = Assembler::new(max_record);
    loop {
        let mut hb = [0u8; 4];
        if asm.raw.is_empty() {
            let n = reader.read(&mut hb).await.map_err(RpcError::Io)?;
            if n == 0 {
                return Ok(None);
            }
            reader.read_exact(&mut hb[n..]).await.map_err(eof_as_truncated)?;
        } else {
            reader.read_exact(&mut hb).await.map_err(eof_as_truncated)?;
        }
        let (hdr, len) = asm.header(hb)?;
        let start = asm.payload.len();
        asm.payload.resize(start + len, 0);
        reader.read_exact(&mut asm.payload[start..]).await.map_err(eof_as_truncated)?;
        asm.raw.extend_from_slice(&asm.payload[start..]);
        if hdr.last {
            return Ok(Some(asm.finish()));
        }
    }
}
