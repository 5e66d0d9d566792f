//! Length-prefixed frames shared by the client and peer protocols.
//!
//! Layout: `[u32 LE payload length][u8 message type][payload]`.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::id::{ObjectId, OBJECT_ID_LEN};

/// Largest payload either protocol accepts.
pub const MAX_FRAME: usize = 16 << 20;
pub const HEADER_LEN: usize = 5;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("connection io: {0}")]
    Io(#[from] io::Error),
    #[error("connection closed by peer")]
    Closed,
    #[error("frame payload of {0} bytes exceeds limit")]
    TooLarge(usize),
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("malformed {what} payload")]
    Malformed { what: &'static str },
}

/// Reads one frame. A clean EOF before the header yields [`FrameError::Closed`].
pub fn read_frame(r: &mut impl Read) -> Result<(u8, Vec<u8>), FrameError> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Err(FrameError::Closed),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(header[..4].try_into().unwrap()) as usize;
    if len > MAX_FRAME {
        return Err(FrameError::TooLarge(len));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok((header[4], payload))
}

pub fn write_frame(w: &mut impl Write, kind: u8, payload: &[u8]) -> Result<(), FrameError> {
    w.write_all(&encode_frame(kind, payload)?)?;
    w.flush()?;
    Ok(())
}

pub fn encode_frame(kind: u8, payload: &[u8]) -> Result<Vec<u8>, FrameError> {
    if payload.len() > MAX_FRAME {
        return Err(FrameError::TooLarge(payload.len()));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + payload.len());
    buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    buf.push(kind);
    buf.extend_from_slice(payload);
    Ok(buf)
}

/// Cursor over a payload; every getter fails with `Malformed` on truncation.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FrameError> {
        if self.buf.len() < n {
            return Err(self.malformed());
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub(crate) fn malformed(&self) -> FrameError {
        FrameError::Malformed { what: self.what }
    }

    pub(crate) fn u8(&mut self) -> Result<u8, FrameError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, FrameError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FrameError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, FrameError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, FrameError> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub(crate) fn bool(&mut self) -> Result<bool, FrameError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(self.malformed()),
        }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8], FrameError> {
        self.take(n)
    }

    pub(crate) fn id(&mut self) -> Result<ObjectId, FrameError> {
        Ok(ObjectId::from_bytes(self.take(OBJECT_ID_LEN)?.try_into().unwrap()))
    }

    /// A `u32` element count whose elements need at least `elem_len` bytes
    /// each; rejects counts the remaining payload cannot hold.
    pub(crate) fn count(&mut self, elem_len: usize) -> Result<usize, FrameError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(elem_len) > self.buf.len() {
            return Err(self.malformed());
        }
        Ok(n)
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len()
    }

    pub(crate) fn finish(self) -> Result<(), FrameError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(self.malformed())
        }
    }
}
