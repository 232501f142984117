//! The wire protocol shared by every participant.

pub mod envelope;
pub mod messages;
pub mod session;

use std::collections::HashMap;

use thiserror::Error;

pub use envelope::{decode, decode_prefix, encode, Channel, Envelope, MsgType, StreamDecoder, HEADER_LEN, MAGIC};
pub use messages::*;
pub use session::{transition, Session, SessionEvent, SessionState};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("bad magic")]
    BadMagic,
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("unsupported protocol version {0}")]
    Unsupported(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("malformed payload: {0}")]
    Payload(String),
    #[error("invalid message: {0}")]
    Validation(String),
    #[error("clock sample rejected: {0}")]
    Clock(String),
}

impl ProtocolError {
    pub fn code(&self) -> &'static str {
        match self {
            ProtocolError::BadMagic | ProtocolError::Protocol(_) => "Protocol",
            ProtocolError::Truncated { .. } => "Truncated",
            ProtocolError::Unsupported(_) => "Unsupported",
            ProtocolError::UnknownType(_) => "UnknownType",
            ProtocolError::Payload(_) => "Payload",
            ProtocolError::Validation(_) => "Validation",
            ProtocolError::Clock(_) => "Clock",
        }
    }

    /// Errors after which the byte stream cannot be trusted.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            ProtocolError::BadMagic | ProtocolError::Protocol(_) | ProtocolError::Unsupported(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OffsetEstimate {
    /// Responder clock minus initiator clock, microseconds.
    pub offset_us: i64,
    pub round_trip_us: i64,
}

/// Standard four-timestamp estimate: `t1` initiator send, `t2` responder
/// receive, `t3` responder send, `t4` initiator receive. The offset is
/// biased by half the path asymmetry.
pub fn estimate_offset(t1: i64, t2: i64, t3: i64, t4: i64) -> Result<OffsetEstimate, ProtocolError> {
    let round_trip_us = (t4 - t1) - (t3 - t2);
    if round_trip_us < 0 {
        return Err(ProtocolError::Clock(format!("negative round trip {round_trip_us}us")));
    }
    if t4 < t1 || t3 < t2 {
        return Err(ProtocolError::Clock("timestamps out of order".into()));
    }
    let offset_us = ((t2 - t1) + (t3 - t4)).div_euclid(2);
    Ok(OffsetEstimate { offset_us, round_trip_us })
}

/// Per-`(content_id, channel)` outgoing sequence numbers.
#[derive(Debug, Default, Clone)]
pub struct Sequencer {
    next: HashMap<(u64, u8), u64>,
}

impl Sequencer {
    pub fn next(&mut self, content_id: u64, channel: Channel) -> u64 {
        let n = self.next.entry((content_id, channel.code())).or_insert(1);
        let s = *n;
        *n += 1;
        s
    }

    /// Wraps a message in an envelope with the next sequence number.
    pub fn envelope(&mut self, msg: &Message) -> Result<Envelope, ProtocolError> {
        let seq = self.next(msg.content_id(), msg.channel());
        msg.to_envelope(seq)
    }
}
