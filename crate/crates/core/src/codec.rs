//! Byte-level helpers shared by the weights and message codecs.
//!
//! Integer header fields are big-endian; tensor element data is little-endian.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("tensor name is {len} bytes, limit is 65535")]
    NameTooLong { len: usize },
    #[error("tensor `{name}` has rank {rank}, limit is 255")]
    RankTooLarge { name: String, rank: usize },
    #[error("extent {extent} of tensor `{name}` does not fit in u32")]
    ExtentTooLarge { name: String, extent: usize },
    #[error("{what} count {count} exceeds limit {limit}")]
    TooMany {
        what: &'static str,
        count: usize,
        limit: usize,
    },
    #[error("string of {len} bytes exceeds limit 65535")]
    StringTooLong { len: usize },
    #[error("truncated input at byte {offset}: need {needed} bytes, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("unknown dtype tag {tag} at byte {offset}")]
    UnknownDType { tag: u8, offset: usize },
    #[error("duplicate tensor name `{name}` at byte {offset}")]
    DuplicateName { name: String, offset: usize },
    #[error("duplicate config key `{key}` at byte {offset}")]
    DuplicateKey { key: String, offset: usize },
    #[error("invalid utf-8 at byte {offset}")]
    InvalidUtf8 { offset: usize },
    #[error("invalid shape at byte {offset}: {reason}")]
    InvalidShape { offset: usize, reason: String },
    #[error("unknown {what} tag {tag} at byte {offset}")]
    UnknownTag {
        what: &'static str,
        tag: u8,
        offset: usize,
    },
    #[error("invalid value at byte {offset}: {reason}")]
    InvalidValue { offset: usize, reason: String },
    #[error("{count} trailing bytes after payload at byte {offset}")]
    TrailingBytes { offset: usize, count: usize },
}

impl CodecError {
    /// Byte offset the decoder was at when the error was detected, if any.
    pub fn offset(&self) -> Option<usize> {
        match self {
            CodecError::Truncated { offset, .. }
            | CodecError::UnknownDType { offset, .. }
            | CodecError::DuplicateName { offset, .. }
            | CodecError::DuplicateKey { offset, .. }
            | CodecError::InvalidUtf8 { offset }
            | CodecError::InvalidShape { offset, .. }
            | CodecError::UnknownTag { offset, .. }
            | CodecError::InvalidValue { offset, .. }
            | CodecError::TrailingBytes { offset, .. } => Some(*offset),
            _ => None,
        }
    }
}

pub(crate) fn put_u8(out: &mut Vec<u8>, v: u8) {
    out.push(v);
}

pub(crate) fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_be_bytes());
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_be_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_be_bytes());
}

pub(crate) fn put_i64(out: &mut Vec<u8>, v: i64) {
    out.extend_from_slice(&v.to_be_bytes());
}

pub(crate) fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_bits().to_be_bytes());
}

/// u16 length prefix + UTF-8 bytes.
pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) -> Result<(), CodecError> {
    let len = u16::try_from(s.len()).map_err(|_| CodecError::StringTooLong { len: s.len() })?;
    put_u16(out, len);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Cursor over an input buffer that reports absolute offsets in errors.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self::with_base(buf, 0)
    }

    /// `base` is added to every reported offset (e.g. a frame header length).
    pub(crate) fn with_base(buf: &'a [u8], base: usize) -> Self {
        Self { buf, pos: 0, base }
    }

    pub(crate) fn offset(&self) -> usize {
        self.base + self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.remaining() < n {
            return Err(CodecError::Truncated {
                offset: self.offset(),
                needed: n,
                available: self.remaining(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, CodecError> {
        self.array().map(u16::from_be_bytes)
    }

    pub(crate) fn u32(&mut self) -> Result<u32, CodecError> {
        self.array().map(u32::from_be_bytes)
    }

    pub(crate) fn u64(&mut self) -> Result<u64, CodecError> {
        self.array().map(u64::from_be_bytes)
    }

    pub(crate) fn i64(&mut self) -> Result<i64, CodecError> {
        self.array().map(i64::from_be_bytes)
    }

    pub(crate) fn f64(&mut self) -> Result<f64, CodecError> {
        self.u64().map(f64::from_bits)
    }

    pub(crate) fn string(&mut self) -> Result<String, CodecError> {
        let len = self.u16()? as usize;
        let at = self.offset();
        let bytes = self.take(len)?;
        std::str::from_utf8(bytes)
            .map(str::to_owned)
            .map_err(|_| CodecError::InvalidUtf8 { offset: at })
    }

    pub(crate) fn finish(&self) -> Result<(), CodecError> {
        match self.remaining() {
            0 => Ok(()),
            count => Err(CodecError::TrailingBytes {
                offset: self.offset(),
                count,
            }),
        }
    }
}
