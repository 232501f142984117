//! Fixed 32-byte little-endian header followed by the payload.
//!
//! ```text
//!  0..4   magic "HPWL"
//!  4      version (1)
//!  5      msg_type
//!  6      flags
//!  7      channel (0 control, 1 data)
//!  8..16  content_id
//! 16..24  sequence
//! 24..28  revision, low 32 bits (high bits must be zero in v1)
//! 28..32  payload_len
//! ```

use super::ProtocolError;

pub const MAGIC: [u8; 4] = *b"HPWL";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 32;
/// Upper bound on a single payload; larger lengths are treated as garbage.
pub const MAX_PAYLOAD: usize = 256 * 1024 * 1024;

/// FRAME pixels are run-length encoded.
pub const FLAG_RLE: u8 = 0x01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MsgType {
    Register,
    Heartbeat,
    SceneSnapshot,
    Command,
    Ack,
    Nack,
    SourceOffer,
    Subscribe,
    Unsubscribe,
    Frame,
    SnapshotReq,
    SnapshotRsp,
    Eos,
    /// Not understood by this build; skipped using `payload_len`.
    Other(u8),
}

impl MsgType {
    pub fn code(self) -> u8 {
        match self {
            MsgType::Register => 1,
            MsgType::Heartbeat => 2,
            MsgType::SceneSnapshot => 3,
            MsgType::Command => 4,
            MsgType::Ack => 5,
            MsgType::Nack => 6,
            MsgType::SourceOffer => 7,
            MsgType::Subscribe => 8,
            MsgType::Unsubscribe => 9,
            MsgType::Frame => 10,
            MsgType::SnapshotReq => 11,
            MsgType::SnapshotRsp => 12,
            MsgType::Eos => 13,
            MsgType::Other(c) => c,
        }
    }

    pub fn from_code(code: u8) -> Self {
        match code {
            1 => MsgType::Register,
            2 => MsgType::Heartbeat,
            3 => MsgType::SceneSnapshot,
            4 => MsgType::Command,
            5 => MsgType::Ack,
            6 => MsgType::Nack,
            7 => MsgType::SourceOffer,
            8 => MsgType::Subscribe,
            9 => MsgType::Unsubscribe,
            10 => MsgType::Frame,
            11 => MsgType::SnapshotReq,
            12 => MsgType::SnapshotRsp,
            13 => MsgType::Eos,
            c => MsgType::Other(c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    Control,
    Data,
}

impl Channel {
    pub fn code(self) -> u8 {
        match self {
            Channel::Control => 0,
            Channel::Data => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub msg_type: MsgType,
    pub flags: u8,
    pub channel: Channel,
    pub content_id: u64,
    pub sequence: u64,
    pub revision: u64,
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn new(msg_type: MsgType, channel: Channel, payload: Vec<u8>) -> Self {
        Envelope {
            msg_type,
            flags: 0,
            channel,
            content_id: 0,
            sequence: 0,
            revision: 0,
            payload,
        }
    }

    /// Bytes on the wire.
    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }
}

pub fn encode(env: &Envelope) -> Result<Vec<u8>, ProtocolError> {
    let mut out = Vec::with_capacity(env.wire_len());
    encode_into(env, &mut out)?;
    Ok(out)
}

pub fn encode_into(env: &Envelope, out: &mut Vec<u8>) -> Result<(), ProtocolError> {
    if env.revision > u32::MAX as u64 {
        return Err(ProtocolError::Validation(format!(
            "revision {} does not fit the v1 header",
            env.revision
        )));
    }
    if env.payload.len() > MAX_PAYLOAD {
        return Err(ProtocolError::Validation(format!(
            "payload of {} bytes exceeds {MAX_PAYLOAD}",
            env.payload.len()
        )));
    }
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(env.msg_type.code());
    out.push(env.flags);
    out.push(env.channel.code());
    out.extend_from_slice(&env.content_id.to_le_bytes());
    out.extend_from_slice(&env.sequence.to_le_bytes());
    out.extend_from_slice(&(env.revision as u32).to_le_bytes());
    out.extend_from_slice(&(env.payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&env.payload);
    Ok(())
}

/// Parsed fixed header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub msg_type: MsgType,
    pub flags: u8,
    pub channel: Channel,
    pub content_id: u64,
    pub sequence: u64,
    pub revision: u64,
    pub payload_len: usize,
}

fn le_u64(b: &[u8]) -> u64 {
    u64::from_le_bytes(b.try_into().expect("8 bytes"))
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("4 bytes"))
}

pub fn decode_header(bytes: &[u8]) -> Result<Header, ProtocolError> {
    if bytes.len() < HEADER_LEN {
        // a wrong magic is detectable before the header is complete
        let n = bytes.len().min(4);
        if bytes[..n] != MAGIC[..n] {
            return Err(ProtocolError::BadMagic);
        }
        return Err(ProtocolError::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    if bytes[0..4] != MAGIC {
        return Err(ProtocolError::BadMagic);
    }
    if bytes[4] != VERSION {
        return Err(ProtocolError::Unsupported(bytes[4]));
    }
    let channel = match bytes[7] {
        0 => Channel::Control,
        1 => Channel::Data,
        c => return Err(ProtocolError::Protocol(format!("unknown channel {c}"))),
    };
    let payload_len = le_u32(&bytes[28..32]) as usize;
    if payload_len > MAX_PAYLOAD {
        return Err(ProtocolError::Protocol(format!("payload length {payload_len} too large")));
    }
    Ok(Header {
        msg_type: MsgType::from_code(bytes[5]),
        flags: bytes[6],
        channel,
        content_id: le_u64(&bytes[8..16]),
        sequence: le_u64(&bytes[16..24]),
        revision: le_u32(&bytes[24..28]) as u64,
        payload_len,
    })
}

/// Decodes one envelope from the front of `bytes`, returning it and the
/// number of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Envelope, usize), ProtocolError> {
    let h = decode_header(bytes)?;
    let total = HEADER_LEN + h.payload_len;
    if bytes.len() < total {
        return Err(ProtocolError::Truncated {
            needed: total,
            available: bytes.len(),
        });
    }
    let env = Envelope {
        msg_type: h.msg_type,
        flags: h.flags,
        channel: h.channel,
        content_id: h.content_id,
        sequence: h.sequence,
        revision: h.revision,
        payload: bytes[HEADER_LEN..total].to_vec(),
    };
    Ok((env, total))
}

/// Decodes exactly one envelope; trailing bytes are an error.
pub fn decode(bytes: &[u8]) -> Result<Envelope, ProtocolError> {
    let (env, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(ProtocolError::Protocol(format!(
            "{} trailing bytes after envelope",
            bytes.len() - used
        )));
    }
    Ok(env)
}

/// Incremental decoder for a byte stream.
#[derive(Debug, Default)]
pub struct StreamDecoder {
    buf: Vec<u8>,
}

impl StreamDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete envelope, `Ok(None)` when more bytes are needed. Any
    /// error is fatal for the stream.
    pub fn next_envelope(&mut self) -> Result<Option<Envelope>, ProtocolError> {
        match decode_prefix(&self.buf) {
            Ok((env, used)) => {
                self.buf.drain(..used);
                Ok(Some(env))
            }
            Err(ProtocolError::Truncated { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}
