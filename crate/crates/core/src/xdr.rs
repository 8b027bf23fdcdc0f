//! XDR primitives: big-endian 32-bit integers and variable-length opaque data.
//!
//! Only the subset the RPC headers and portmapper protocol need is provided.
//! Encoding always emits zero padding; decoding accepts any padding bytes.

use thiserror::Error;

/// Default cap on a decoded variable-length opaque field (1 MiB).
pub const DEFAULT_MAX_OPAQUE: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum XdrError {
    #[error("truncated: needed {needed} bytes, {remaining} remain")]
    Truncated { needed: usize, remaining: usize },
    #[error("opaque field of {len} bytes exceeds limit of {max}")]
    OversizeField { len: usize, max: usize },
}

/// Number of zero bytes needed to bring `len` up to a multiple of four.
#[inline]
pub fn padding(len: usize) -> usize {
    (4 - (len % 4)) % 4
}

pub fn encode_u32(value: u32) -> [u8; 4] {
    value.to_be_bytes()
}

pub fn put_u32(out: &mut Vec<u8>, value: u32) {
    out.extend_from_slice(&encode_u32(value));
}

/// Appends a length-prefixed, zero-padded opaque field.
///
/// Panics if `data` is longer than `u32::MAX` bytes.
pub fn put_opaque_var(out: &mut Vec<u8>, data: &[u8]) {
    let len = u32::try_from(data.len()).expect("opaque length exceeds u32");
    put_u32(out, len);
    out.extend_from_slice(data);
    out.resize(out.len() + padding(data.len()), 0);
}

pub fn encode_opaque_var(data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + data.len() + 3);
    put_opaque_var(&mut out, data);
    out
}

/// Read position over an XDR-encoded buffer.
#[derive(Debug, Clone)]
pub struct XdrCursor<'a> {
    buf: &'a [u8],
    offset: usize,
    max_opaque: usize,
}

impl<'a> XdrCursor<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self::with_max_opaque(buf, DEFAULT_MAX_OPAQUE)
    }

    pub fn with_max_opaque(buf: &'a [u8], max_opaque: usize) -> Self {
        XdrCursor { buf, offset: 0, max_opaque }
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.offset
    }

    /// Bytes past the cursor, without consuming them.
    pub fn rest(&self) -> &'a [u8] {
        &self.buf[self.offset..]
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], XdrError> {
        if self.remaining() < n {
            return Err(XdrError::Truncated { needed: n, remaining: self.remaining() });
        }
        let s = &self.buf[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    pub fn decode_u32(&mut self) -> Result<u32, XdrError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Decodes a variable-length opaque field, skipping (and ignoring) its padding.
    ///
    /// The cursor is left untouched on error.
    pub fn decode_opaque_var(&mut self) -> Result<&'a [u8], XdrError> {
        let start = self.offset;
        let res = self.decode_opaque_inner();
        if res.is_err() {
            self.offset = start;
        }
        res
    }

    fn decode_opaque_inner(&mut self) -> Result<&'a [u8], XdrError> {
        let len = self.decode_u32()? as usize;
        if len > self.max_opaque {
            return Err(XdrError::OversizeField { len, max: self.max_opaque });
        }
        let padded = len + padding(len);
        if self.remaining() < padded {
            return Err(XdrError::Truncated { needed: padded, remaining: self.remaining() });
        }
        let data = self.take(len)?;
        self.offset += padding(len);
        Ok(data)
    }
}
