//! Drone/ground wire protocol.
//!
//! Every message is framed as
//!
//! ```text
//! "RLNK" | version: u8 = 1 | msg_type: u8 | payload_len: u32 LE | payload
//! ```
//!
//! All integers are little-endian. Payload layouts:
//!
//! | type | code | payload |
//! |------|------|---------|
//! | Hello | 1 | width u32, height u32, downscale u16, accounting u8, flags u8 |
//! | FrameMeta | 2 | frame_id u64, timestamp_us u64, width u32, height u32, downscale u16, budget_r u32 (micro-units) |
//! | BaseLayer | 3 | frame_id u64, width u32, height u32, then width*height gray bytes |
//! | RoiList | 4 | frame_id u64, count u32, then per entry x,y,w,h u32, origin u8, request_id u64 |
//! | RoiTile | 5 | frame_id u64, x,y,w,h u32, origin u8, then 3*w*h RGB bytes |
//! | CustomRoiRequest | 6 | request_id u64, x,y,w,h u32, persistent u8 |
//! | Ack | 7 | request_id u64, code u8 |
//! | Bye | 8 | empty |
//!
//! A `CustomRoiRequest` with a zero-area rect cancels the request with that id.

use roilink_core::{Accounting, FrameDims, RectPx};
use std::io::{self, Read};

pub const MAGIC: [u8; 4] = *b"RLNK";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;
/// Upper bound on a payload; a 3840x2160 RGB tile is about 25 MB.
pub const MAX_PAYLOAD: u32 = 256 << 20;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("truncated message: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("payload declared {declared} bytes but parses to {parsed}")]
    LengthMismatch { declared: usize, parsed: usize },
    #[error("payload of {0} bytes exceeds the limit")]
    PayloadTooLarge(u32),
    #[error("invalid field: {0}")]
    InvalidField(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    FrameMeta = 2,
    BaseLayer = 3,
    RoiList = 4,
    RoiTile = 5,
    CustomRoiRequest = 6,
    Ack = 7,
    Bye = 8,
}

impl TryFrom<u8> for MsgType {
    type Error = ProtocolError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Ok(match v {
            1 => MsgType::Hello,
            2 => MsgType::FrameMeta,
            3 => MsgType::BaseLayer,
            4 => MsgType::RoiList,
            5 => MsgType::RoiTile,
            6 => MsgType::CustomRoiRequest,
            7 => MsgType::Ack,
            8 => MsgType::Bye,
            other => return Err(ProtocolError::UnknownType(other)),
        })
    }
}

/// Who asked for a tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Origin {
    Algorithmic = 0,
    OperatorRequested = 1,
}

impl TryFrom<u8> for Origin {
    type Error = ProtocolError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Origin::Algorithmic),
            1 => Ok(Origin::OperatorRequested),
            _ => Err(ProtocolError::InvalidField("origin")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AckCode {
    Accepted = 0,
    /// The requested rect is not inside the frame.
    OutOfBounds = 1,
    /// The rect does not fit the remaining bandwidth budget.
    OverBudget = 2,
    Cancelled = 3,
    /// Sent upstream by the ground station once a frame is complete;
    /// `request_id` carries the frame id.
    FrameDone = 4,
    UnknownRequest = 5,
}

impl TryFrom<u8> for AckCode {
    type Error = ProtocolError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Ok(match v {
            0 => AckCode::Accepted,
            1 => AckCode::OutOfBounds,
            2 => AckCode::OverBudget,
            3 => AckCode::Cancelled,
            4 => AckCode::FrameDone,
            5 => AckCode::UnknownRequest,
            _ => return Err(ProtocolError::InvalidField("ack code")),
        })
    }
}

impl AckCode {
    pub fn name(&self) -> &'static str {
        match self {
            AckCode::Accepted => "accepted",
            AckCode::OutOfBounds => "out_of_bounds",
            AckCode::OverBudget => "over_budget",
            AckCode::Cancelled => "cancelled",
            AckCode::FrameDone => "frame_done",
            AckCode::UnknownRequest => "unknown_request",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hello {
    pub dims: FrameDims,
    pub downscale: u16,
    pub accounting: Accounting,
    /// Operator tiles bypass the budget instead of sharing it.
    pub operator_overrides_budget: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameMeta {
    pub frame_id: u64,
    pub timestamp_us: u64,
    pub dims: FrameDims,
    pub downscale: u16,
    /// Budget portion in millionths.
    pub budget_r_micro: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaseLayer {
    pub frame_id: u64,
    pub width: u32,
    pub height: u32,
    pub luma: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoiEntry {
    pub rect: RectPx,
    pub origin: Origin,
    /// Nonzero for operator-requested tiles.
    pub request_id: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiList {
    pub frame_id: u64,
    pub entries: Vec<RoiEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiTile {
    pub frame_id: u64,
    pub rect: RectPx,
    pub origin: Origin,
    /// Interleaved RGB, `3 * w * h` bytes.
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CustomRoiRequest {
    pub request_id: u64,
    pub rect: RectPx,
    pub persistent: bool,
}

impl CustomRoiRequest {
    pub fn cancel(request_id: u64) -> Self {
        CustomRoiRequest { request_id, rect: RectPx::EMPTY, persistent: false }
    }

    pub fn is_cancel(&self) -> bool {
        self.rect.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ack {
    pub request_id: u64,
    pub code: AckCode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WireMessage {
    Hello(Hello),
    FrameMeta(FrameMeta),
    BaseLayer(BaseLayer),
    RoiList(RoiList),
    RoiTile(RoiTile),
    CustomRoiRequest(CustomRoiRequest),
    Ack(Ack),
    Bye,
}

impl WireMessage {
    pub fn msg_type(&self) -> MsgType {
        match self {
            WireMessage::Hello(_) => MsgType::Hello,
            WireMessage::FrameMeta(_) => MsgType::FrameMeta,
            WireMessage::BaseLayer(_) => MsgType::BaseLayer,
            WireMessage::RoiList(_) => MsgType::RoiList,
            WireMessage::RoiTile(_) => MsgType::RoiTile,
            WireMessage::CustomRoiRequest(_) => MsgType::CustomRoiRequest,
            WireMessage::Ack(_) => MsgType::Ack,
            WireMessage::Bye => MsgType::Bye,
        }
    }
}

// Rect fields travel as u32. Negative coordinates cannot be represented.
fn rect_u32(r: &RectPx) -> [u32; 4] {
    [r.x, r.y, r.w, r.h].map(|v| u32::try_from(v.max(0)).unwrap_or(u32::MAX))
}

struct Out(Vec<u8>);

impl Out {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn rect(&mut self, r: &RectPx) {
        for v in rect_u32(r) {
            self.u32(v);
        }
    }
}

/// Serializes `msg` with its header.
pub fn encode(msg: &WireMessage) -> Vec<u8> {
    let mut out = Out(Vec::with_capacity(64));
    out.0.extend_from_slice(&MAGIC);
    out.u8(VERSION);
    out.u8(msg.msg_type() as u8);
    out.u32(0); // patched below
    match msg {
        WireMessage::Hello(h) => {
            out.u32(h.dims.width);
            out.u32(h.dims.height);
            out.u16(h.downscale);
            out.u8(match h.accounting {
                Accounting::UnionPixels => 0,
                Accounting::SumOfCropAreas => 1,
            });
            out.u8(h.operator_overrides_budget as u8);
        }
        WireMessage::FrameMeta(m) => {
            out.u64(m.frame_id);
            out.u64(m.timestamp_us);
            out.u32(m.dims.width);
            out.u32(m.dims.height);
            out.u16(m.downscale);
            out.u32(m.budget_r_micro);
        }
        WireMessage::BaseLayer(b) => {
            out.u64(b.frame_id);
            out.u32(b.width);
            out.u32(b.height);
            out.0.extend_from_slice(&b.luma);
        }
        WireMessage::RoiList(l) => {
            out.u64(l.frame_id);
            out.u32(l.entries.len() as u32);
            for e in &l.entries {
                out.rect(&e.rect);
                out.u8(e.origin as u8);
                out.u64(e.request_id);
            }
        }
        WireMessage::RoiTile(t) => {
            out.u64(t.frame_id);
            out.rect(&t.rect);
            out.u8(t.origin as u8);
            out.0.extend_from_slice(&t.pixels);
        }
        WireMessage::CustomRoiRequest(r) => {
            out.u64(r.request_id);
            out.rect(&r.rect);
            out.u8(r.persistent as u8);
        }
        WireMessage::Ack(a) => {
            out.u64(a.request_id);
            out.u8(a.code as u8);
        }
        WireMessage::Bye => {}
    }
    let len = (out.0.len() - HEADER_LEN) as u32;
    out.0[6..10].copy_from_slice(&len.to_le_bytes());
    out.0
}

struct In<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> In<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(
            ProtocolError::LengthMismatch { declared: self.buf.len(), parsed: self.pos.saturating_add(n) },
        )?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, ProtocolError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn rect(&mut self) -> Result<RectPx, ProtocolError> {
        let x = self.u32()? as i64;
        let y = self.u32()? as i64;
        let w = self.u32()? as i64;
        let h = self.u32()? as i64;
        Ok(RectPx::new(x, y, w, h))
    }
    fn flag(&mut self, name: &'static str) -> Result<bool, ProtocolError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(ProtocolError::InvalidField(name)),
        }
    }
    fn dims(&mut self) -> Result<FrameDims, ProtocolError> {
        let (w, h) = (self.u32()?, self.u32()?);
        FrameDims::new(w, h).map_err(|_| ProtocolError::InvalidField("dimensions"))
    }
}

/// Parses the fixed header. Returns message type and payload length.
pub fn decode_header(bytes: &[u8]) -> Result<(MsgType, usize), ProtocolError> {
    let have = bytes.len();
    let check = HEADER_LEN.min(have);
    if bytes[..check.min(4)] != MAGIC[..check.min(4)] {
        return Err(ProtocolError::BadMagic);
    }
    if have < HEADER_LEN {
        return Err(ProtocolError::Truncated { needed: HEADER_LEN, have });
    }
    if bytes[4] != VERSION {
        return Err(ProtocolError::UnsupportedVersion(bytes[4]));
    }
    let ty = MsgType::try_from(bytes[5])?;
    let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return Err(ProtocolError::PayloadTooLarge(len));
    }
    Ok((ty, len as usize))
}

/// Decodes the message at the start of `bytes`. Returns it with the number
/// of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(WireMessage, usize), ProtocolError> {
    let (ty, len) = decode_header(bytes)?;
    let total = HEADER_LEN + len;
    if bytes.len() < total {
        return Err(ProtocolError::Truncated { needed: total, have: bytes.len() });
    }
    let payload = &bytes[HEADER_LEN..total];
    let mut r = In { buf: payload, pos: 0 };
    let msg = match ty {
        MsgType::Hello => {
            let dims = r.dims()?;
            let downscale = r.u16()?;
            if downscale == 0 {
                return Err(ProtocolError::InvalidField("downscale"));
            }
            let accounting = match r.u8()? {
                0 => Accounting::UnionPixels,
                1 => Accounting::SumOfCropAreas,
                _ => return Err(ProtocolError::InvalidField("accounting")),
            };
            let operator_overrides_budget = r.flag("flags")?;
            WireMessage::Hello(Hello { dims, downscale, accounting, operator_overrides_budget })
        }
        MsgType::FrameMeta => {
            let frame_id = r.u64()?;
            let timestamp_us = r.u64()?;
            let dims = r.dims()?;
            let downscale = r.u16()?;
            if downscale == 0 {
                return Err(ProtocolError::InvalidField("downscale"));
            }
            let budget_r_micro = r.u32()?;
            if budget_r_micro > 1_000_000 {
                return Err(ProtocolError::InvalidField("budget_r"));
            }
            WireMessage::FrameMeta(FrameMeta { frame_id, timestamp_us, dims, downscale, budget_r_micro })
        }
        MsgType::BaseLayer => {
            let frame_id = r.u64()?;
            let (width, height) = (r.u32()?, r.u32()?);
            let n = (width as u64 * height as u64).min(usize::MAX as u64) as usize;
            let luma = r.take(n)?.to_vec();
            WireMessage::BaseLayer(BaseLayer { frame_id, width, height, luma })
        }
        MsgType::RoiList => {
            let frame_id = r.u64()?;
            let count = r.u32()? as usize;
            if count > len / 25 {
                return Err(ProtocolError::LengthMismatch { declared: len, parsed: 12 + count.saturating_mul(25) });
            }
            let mut entries = Vec::with_capacity(count);
            for _ in 0..count {
                let rect = r.rect()?;
                let origin = Origin::try_from(r.u8()?)?;
                let request_id = r.u64()?;
                entries.push(RoiEntry { rect, origin, request_id });
            }
            WireMessage::RoiList(RoiList { frame_id, entries })
        }
        MsgType::RoiTile => {
            let frame_id = r.u64()?;
            let rect = r.rect()?;
            let origin = Origin::try_from(r.u8()?)?;
            let n = 3u128 * rect.w as u128 * rect.h as u128;
            if n != (len - r.pos.min(len)) as u128 {
                return Err(ProtocolError::LengthMismatch {
                    declared: len,
                    parsed: (r.pos as u128).saturating_add(n).min(usize::MAX as u128) as usize,
                });
            }
            let pixels = r.take(n as usize)?.to_vec();
            WireMessage::RoiTile(RoiTile { frame_id, rect, origin, pixels })
        }
        MsgType::CustomRoiRequest => {
            let request_id = r.u64()?;
            let rect = r.rect()?;
            let persistent = r.flag("persistent")?;
            WireMessage::CustomRoiRequest(CustomRoiRequest { request_id, rect, persistent })
        }
        MsgType::Ack => {
            let request_id = r.u64()?;
            let code = AckCode::try_from(r.u8()?)?;
            WireMessage::Ack(Ack { request_id, code })
        }
        MsgType::Bye => WireMessage::Bye,
    };
    if r.pos != len {
        return Err(ProtocolError::LengthMismatch { declared: len, parsed: r.pos });
    }
    Ok((msg, total))
}

/// What a [`MessageReader`] produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Incoming {
    Message(WireMessage),
    /// A malformed message was skipped; the reader resynchronized on the
    /// next magic.
    Malformed(ProtocolError),
}

/// Incremental decoder over a byte stream.
pub struct MessageReader<R> {
    inner: R,
    buf: Vec<u8>,
    start: usize,
    eof: bool,
}

impl<R: Read> MessageReader<R> {
    pub fn new(inner: R) -> Self {
        MessageReader { inner, buf: Vec::with_capacity(64 * 1024), start: 0, eof: false }
    }

    fn pending(&self) -> &[u8] {
        &self.buf[self.start..]
    }

    fn fill(&mut self) -> io::Result<usize> {
        if self.start > 0 && self.start * 2 >= self.buf.len() {
            self.buf.drain(..self.start);
            self.start = 0;
        }
        let mut chunk = [0u8; 64 * 1024];
        let n = loop {
            match self.inner.read(&mut chunk) {
                Ok(n) => break n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e),
            }
        };
        if n == 0 {
            self.eof = true;
        }
        self.buf.extend_from_slice(&chunk[..n]);
        Ok(n)
    }

    // Drop at least one byte and everything up to the next magic.
    fn resync(&mut self) {
        let data = self.pending();
        let skip = data
            .windows(4)
            .skip(1)
            .position(|w| w == MAGIC)
            .map(|p| p + 1)
            .unwrap_or_else(|| data.len().saturating_sub(3).max(1).min(data.len()));
        self.start += skip;
    }

    /// Next message or malformed-message notice. `Ok(None)` at end of
    /// stream.
    pub fn next_incoming(&mut self) -> io::Result<Option<Incoming>> {
        loop {
            if !self.pending().is_empty() {
                match decode(self.pending()) {
                    Ok((msg, used)) => {
                        self.start += used;
                        return Ok(Some(Incoming::Message(msg)));
                    }
                    Err(ProtocolError::Truncated { .. }) if !self.eof => {}
                    Err(ProtocolError::Truncated { .. }) => {
                        let err = decode(self.pending()).unwrap_err();
                        self.start = self.buf.len();
                        return Ok(Some(Incoming::Malformed(err)));
                    }
                    Err(err) => {
                        self.resync();
                        return Ok(Some(Incoming::Malformed(err)));
                    }
                }
            } else if self.eof {
                return Ok(None);
            }
            self.fill()?;
        }
    }

    /// Next well-formed message, logging and skipping malformed ones.
    pub fn next_message(&mut self) -> io::Result<Option<WireMessage>> {
        while let Some(incoming) = self.next_incoming()? {
            match incoming {
                Incoming::Message(m) => return Ok(Some(m)),
                Incoming::Malformed(e) => log::warn!("skipping malformed message: {e}"),
            }
        }
        Ok(None)
    }
}
