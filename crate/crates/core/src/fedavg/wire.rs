//! `FPFL` frames.
//!
//! ```text
//! "FPFL" | version u16 | kind u8 | round u32 | reader_id u32 | example_count u64 | payload_len u64 | payload
//! ```
//!
//! All little-endian. Weight payloads use the checkpoint layout.

use std::io::Read;

use super::FedError;

pub const WIRE_MAGIC: &[u8; 4] = b"FPFL";
pub const WIRE_VERSION: u16 = 1;
pub const FRAME_HEADER_LEN: usize = 4 + 2 + 1 + 4 + 4 + 8 + 8;
/// Frames announcing a larger payload are rejected before it is read.
pub const MAX_PAYLOAD_LEN: u64 = 1 << 30;
/// `reader_id` of server-to-all messages.
pub const ALL_READERS: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    Weights = 0,
    BootstrapWeights = 1,
    StartRound = 2,
    Shutdown = 3,
}

impl PayloadKind {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Weights),
            1 => Some(Self::BootstrapWeights),
            2 => Some(Self::StartRound),
            3 => Some(Self::Shutdown),
            _ => None,
        }
    }
}

/// One protocol message.
///
/// `example_count` is the sender's training-set size on reader messages. On
/// server `StartRound` and `BootstrapWeights` requests it carries the number
/// of local epochs to run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: PayloadKind,
    pub round: u32,
    pub reader_id: u32,
    pub example_count: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn control(kind: PayloadKind, round: u32, reader_id: u32, example_count: u64) -> Self {
        Self {
            kind,
            round,
            reader_id,
            example_count,
            payload: Vec::new(),
        }
    }

    pub fn wire_len(&self) -> usize {
        FRAME_HEADER_LEN + self.payload.len()
    }
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let mut out = Vec::with_capacity(frame.wire_len());
    out.extend_from_slice(WIRE_MAGIC);
    out.extend_from_slice(&WIRE_VERSION.to_le_bytes());
    out.push(frame.kind as u8);
    out.extend_from_slice(&frame.round.to_le_bytes());
    out.extend_from_slice(&frame.reader_id.to_le_bytes());
    out.extend_from_slice(&frame.example_count.to_le_bytes());
    out.extend_from_slice(&(frame.payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&frame.payload);
    out
}

struct Header {
    kind: PayloadKind,
    round: u32,
    reader_id: u32,
    example_count: u64,
    payload_len: u64,
}

fn parse_header(h: &[u8; FRAME_HEADER_LEN]) -> Result<Header, FedError> {
    let magic: [u8; 4] = h[..4].try_into().expect("4 bytes");
    if &magic != WIRE_MAGIC {
        return Err(FedError::BadMagic(magic));
    }
    let version = u16::from_le_bytes([h[4], h[5]]);
    if version != WIRE_VERSION {
        return Err(FedError::VersionMismatch {
            found: version,
            expected: WIRE_VERSION,
        });
    }
    let kind = PayloadKind::from_u8(h[6]).ok_or_else(|| FedError::Malformed(format!("unknown payload kind {}", h[6])))?;
    let u32_at = |o: usize| u32::from_le_bytes(h[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(h[o..o + 8].try_into().expect("8 bytes"));
    let payload_len = u64_at(23);
    if payload_len > MAX_PAYLOAD_LEN {
        return Err(FedError::Malformed(format!("payload length {payload_len} exceeds limit")));
    }
    Ok(Header {
        kind,
        round: u32_at(7),
        reader_id: u32_at(11),
        example_count: u64_at(15),
        payload_len,
    })
}

/// Reads one frame; the header is validated before the payload is read.
pub fn read_frame<R: Read + ?Sized>(r: &mut R) -> Result<Frame, FedError> {
    let mut h = [0u8; FRAME_HEADER_LEN];
    r.read_exact(&mut h)?;
    let header = parse_header(&h)?;
    let mut payload = vec![0u8; header.payload_len as usize];
    r.read_exact(&mut payload)?;
    Ok(Frame {
        kind: header.kind,
        round: header.round,
        reader_id: header.reader_id,
        example_count: header.example_count,
        payload,
    })
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode_frame(bytes: &[u8]) -> Result<Frame, FedError> {
    if bytes.len() < FRAME_HEADER_LEN {
        return Err(FedError::Malformed(format!("{} bytes is shorter than a frame header", bytes.len())));
    }
    let mut cursor = bytes;
    let frame = read_frame(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(FedError::Malformed(format!("{} trailing bytes", cursor.len())));
    }
    Ok(frame)
}
