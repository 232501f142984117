//! Payload schemas. Control-plane payloads are JSON; FRAME is binary.

use serde::{Deserialize, Serialize};

use super::envelope::{Channel, Envelope, MsgType, FLAG_RLE};
use super::ProtocolError;
use crate::geometry::{Rect, TileId};
use crate::raster::Raster;
use crate::scene::{ContentId, ContentKind, PlacementId, Scene, ZDirection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Control,
    Display,
    Sender,
    Streamer,
    Ui,
}

impl Role {
    pub fn is_source(&self) -> bool {
        matches!(self, Role::Sender | Role::Streamer)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Capabilities {
    /// Where display nodes reach this source's data plane.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_addr: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub encodings: Vec<Encoding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Register {
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile: Option<TileId>,
    /// Stable name of a source; used to re-attach saved layouts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub capabilities: Capabilities,
}

/// Four-timestamp exchange. The initiator fills `t1`; the responder echoes it
/// with its receive (`t2`) and send (`t3`) times. Microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Heartbeat {
    pub t1: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t2: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t3: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceEndpoint {
    pub content_id: ContentId,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_addr: Option<String>,
    pub online: bool,
    /// Bumped on every (re)registration; frame sequences restart per epoch.
    #[serde(default)]
    pub epoch: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileStatus {
    pub tile: TileId,
    pub online: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RegistrySummary {
    pub tiles: Vec<TileStatus>,
    pub sources: Vec<SourceEndpoint>,
    pub slots_used: usize,
    pub max_projections: usize,
    pub wall_ready: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSnapshot {
    pub scene: Scene,
    pub registry: RegistrySummary,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum CommandOp {
    /// Registers a non-live content object (pyramid image or test pattern).
    AddContent {
        kind: ContentKind,
        natural_w: u32,
        natural_h: u32,
        source_ref: String,
    },
    Place {
        content: ContentId,
        x: f64,
        y: f64,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        rotation_deg: f64,
    },
    Move {
        placement: PlacementId,
        x: f64,
        y: f64,
    },
    Resize {
        placement: PlacementId,
        scale: f64,
    },
    Rotate {
        placement: PlacementId,
        rotation_deg: f64,
    },
    SetZ {
        placement: PlacementId,
        direction: ZDirection,
    },
    Remove {
        placement: PlacementId,
    },
    Save {
        name: String,
    },
    Load {
        name: String,
    },
    ListEnvironments,
    DeleteEnvironment {
        name: String,
    },
}

impl CommandOp {
    /// Whether a successful execution changes the scene.
    pub fn mutates_scene(&self) -> bool {
        !matches!(
            self,
            CommandOp::Save { .. } | CommandOp::ListEnvironments | CommandOp::DeleteEnvironment { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub command_id: u64,
    #[serde(flatten)]
    pub op: CommandOp,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Ack {
    pub command_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_id: Option<ContentId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement_id: Option<PlacementId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revision: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub environments: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nack {
    pub command_id: u64,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceOffer {
    pub content_id: ContentId,
    pub name: String,
    pub kind: ContentKind,
    pub natural_w: u32,
    pub natural_h: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thumbnail: Option<Raster>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscribe {
    pub content_id: ContentId,
    /// Source-space rectangle this subscriber needs.
    pub rect: Rect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unsubscribe {
    pub content_id: ContentId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotMode {
    Raster,
    Digest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotReq {
    pub mode: SnapshotMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRsp {
    pub tile: TileId,
    pub revision: u64,
    pub width: u32,
    pub height: u32,
    /// FNV-1a 64 of the framebuffer pixels, hex.
    pub digest: String,
    /// Binary PPM, base64; present in raster mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ppm_base64: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Eos {
    pub content_id: ContentId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    Raw,
    Rle,
}

impl Encoding {
    fn code(self) -> u16 {
        match self {
            Encoding::Raw => 0,
            Encoding::Rle => 1,
        }
    }
}

/// x, y, w, h (u32 each), encoding (u16), reserved (u16), deadline (u64).
pub const FRAME_SUBHEADER_LEN: usize = 28;

/// One rectangular region of one source frame. The frame sequence number is
/// the envelope's `sequence`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub content_id: ContentId,
    pub region: Rect,
    pub encoding: Encoding,
    /// Presentation deadline, microseconds in the control service's clock.
    pub deadline_us: u64,
    /// Raw RGB8 rows of `region`, regardless of `encoding`.
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn raster(&self) -> Raster {
        Raster::from_rgb(self.region.w as u32, self.region.h as u32, self.pixels.clone())
            .expect("frame pixels sized at decode")
    }
}

/// Runs of identical pixels as `(count 1..=255, r, g, b)` quadruples.
pub fn rle_encode(rgb: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < rgb.len() {
        let px = &rgb[i..i + 3];
        let mut n = 1;
        while n < 255 && i + 3 * n + 3 <= rgb.len() && &rgb[i + 3 * n..i + 3 * n + 3] == px {
            n += 1;
        }
        out.push(n as u8);
        out.extend_from_slice(px);
        i += 3 * n;
    }
    out
}

pub fn rle_decode(data: &[u8], pixels: usize) -> Result<Vec<u8>, ProtocolError> {
    if data.len() % 4 != 0 {
        return Err(ProtocolError::Protocol("RLE stream not a whole number of runs".into()));
    }
    let mut out = Vec::with_capacity(pixels * 3);
    for run in data.chunks_exact(4) {
        if run[0] == 0 {
            return Err(ProtocolError::Protocol("zero-length RLE run".into()));
        }
        if out.len() / 3 + run[0] as usize > pixels {
            return Err(ProtocolError::Protocol("RLE overruns region".into()));
        }
        for _ in 0..run[0] {
            out.extend_from_slice(&run[1..4]);
        }
    }
    if out.len() != pixels * 3 {
        return Err(ProtocolError::Protocol("RLE underruns region".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Register(Register),
    Heartbeat(Heartbeat),
    SceneSnapshot(Box<SceneSnapshot>),
    Command(Command),
    Ack(Ack),
    Nack(Nack),
    SourceOffer(SourceOffer),
    Subscribe(Subscribe),
    Unsubscribe(Unsubscribe),
    Frame(Frame),
    SnapshotReq(SnapshotReq),
    SnapshotRsp(SnapshotRsp),
    Eos(Eos),
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("payload serializes")
}

fn from_json<'a, T: Deserialize<'a>>(bytes: &'a [u8]) -> Result<T, ProtocolError> {
    serde_json::from_slice(bytes).map_err(|e| ProtocolError::Payload(e.to_string()))
}

fn rect_to_u32(r: &Rect) -> Result<[u32; 4], ProtocolError> {
    let conv = |v: i64| u32::try_from(v).map_err(|_| ProtocolError::Validation(format!("region {r} not representable")));
    Ok([conv(r.x)?, conv(r.y)?, conv(r.w)?, conv(r.h)?])
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::Register(_) => MsgType::Register,
            Message::Heartbeat(_) => MsgType::Heartbeat,
            Message::SceneSnapshot(_) => MsgType::SceneSnapshot,
            Message::Command(_) => MsgType::Command,
            Message::Ack(_) => MsgType::Ack,
            Message::Nack(_) => MsgType::Nack,
            Message::SourceOffer(_) => MsgType::SourceOffer,
            Message::Subscribe(_) => MsgType::Subscribe,
            Message::Unsubscribe(_) => MsgType::Unsubscribe,
            Message::Frame(_) => MsgType::Frame,
            Message::SnapshotReq(_) => MsgType::SnapshotReq,
            Message::SnapshotRsp(_) => MsgType::SnapshotRsp,
            Message::Eos(_) => MsgType::Eos,
        }
    }

    /// Frames and subscriptions travel on the data plane.
    pub fn channel(&self) -> Channel {
        match self {
            Message::Frame(_) | Message::Subscribe(_) | Message::Unsubscribe(_) => Channel::Data,
            _ => Channel::Control,
        }
    }

    pub fn content_id(&self) -> u64 {
        match self {
            Message::SourceOffer(m) => m.content_id.0,
            Message::Subscribe(m) => m.content_id.0,
            Message::Unsubscribe(m) => m.content_id.0,
            Message::Frame(m) => m.content_id.0,
            Message::Eos(m) => m.content_id.0,
            _ => 0,
        }
    }

    pub fn revision(&self) -> u64 {
        match self {
            Message::SceneSnapshot(s) => s.scene.revision(),
            Message::SnapshotRsp(s) => s.revision,
            _ => 0,
        }
    }

    pub fn to_envelope(&self, sequence: u64) -> Result<Envelope, ProtocolError> {
        let mut flags = 0;
        let payload = match self {
            Message::Register(m) => json(m),
            Message::Heartbeat(m) => json(m),
            Message::SceneSnapshot(m) => json(m),
            Message::Command(m) => json(m),
            Message::Ack(m) => json(m),
            Message::Nack(m) => json(m),
            Message::SourceOffer(m) => json(m),
            Message::Subscribe(m) => json(m),
            Message::Unsubscribe(m) => json(m),
            Message::SnapshotReq(m) => json(m),
            Message::SnapshotRsp(m) => json(m),
            Message::Eos(m) => json(m),
            Message::Frame(f) => {
                let [x, y, w, h] = rect_to_u32(&f.region)?;
                if f.pixels.len() != w as usize * h as usize * 3 {
                    return Err(ProtocolError::Validation("frame pixels do not match region".into()));
                }
                let body = match f.encoding {
                    Encoding::Raw => f.pixels.clone(),
                    Encoding::Rle => {
                        flags |= FLAG_RLE;
                        rle_encode(&f.pixels)
                    }
                };
                let mut p = Vec::with_capacity(FRAME_SUBHEADER_LEN + body.len());
                for v in [x, y, w, h] {
                    p.extend_from_slice(&v.to_le_bytes());
                }
                p.extend_from_slice(&f.encoding.code().to_le_bytes());
                p.extend_from_slice(&0u16.to_le_bytes());
                p.extend_from_slice(&f.deadline_us.to_le_bytes());
                p.extend_from_slice(&body);
                p
            }
        };
        Ok(Envelope {
            msg_type: self.msg_type(),
            flags,
            channel: self.channel(),
            content_id: self.content_id(),
            sequence,
            revision: self.revision(),
            payload,
        })
    }

    pub fn from_envelope(env: &Envelope) -> Result<Message, ProtocolError> {
        let p = &env.payload[..];
        Ok(match env.msg_type {
            MsgType::Register => Message::Register(from_json(p)?),
            MsgType::Heartbeat => Message::Heartbeat(from_json(p)?),
            MsgType::SceneSnapshot => Message::SceneSnapshot(Box::new(from_json(p)?)),
            MsgType::Command => Message::Command(from_json(p)?),
            MsgType::Ack => Message::Ack(from_json(p)?),
            MsgType::Nack => Message::Nack(from_json(p)?),
            MsgType::SourceOffer => Message::SourceOffer(from_json(p)?),
            MsgType::Subscribe => Message::Subscribe(from_json(p)?),
            MsgType::Unsubscribe => Message::Unsubscribe(from_json(p)?),
            MsgType::SnapshotReq => Message::SnapshotReq(from_json(p)?),
            MsgType::SnapshotRsp => Message::SnapshotRsp(from_json(p)?),
            MsgType::Eos => Message::Eos(from_json(p)?),
            MsgType::Frame => Message::Frame(decode_frame(env)?),
            MsgType::Other(c) => return Err(ProtocolError::UnknownType(c)),
        })
    }
}

fn decode_frame(env: &Envelope) -> Result<Frame, ProtocolError> {
    let p = &env.payload;
    if p.len() < FRAME_SUBHEADER_LEN {
        return Err(ProtocolError::Truncated {
            needed: FRAME_SUBHEADER_LEN,
            available: p.len(),
        });
    }
    let u = |i: usize| u32::from_le_bytes(p[i..i + 4].try_into().unwrap());
    let (x, y, w, h) = (u(0), u(4), u(8), u(12));
    let enc = u16::from_le_bytes([p[16], p[17]]);
    let deadline_us = u64::from_le_bytes(p[20..28].try_into().unwrap());
    if w == 0 || h == 0 {
        return Err(ProtocolError::Protocol(format!("empty frame region {w}x{h}")));
    }
    let pixels = (w as usize)
        .checked_mul(h as usize)
        .filter(|n| *n <= super::envelope::MAX_PAYLOAD / 3)
        .ok_or_else(|| ProtocolError::Protocol(format!("frame region {w}x{h} too large")))?;
    let body = &p[FRAME_SUBHEADER_LEN..];
    let encoding = match enc {
        0 => Encoding::Raw,
        1 => Encoding::Rle,
        e => return Err(ProtocolError::Protocol(format!("unknown frame encoding {e}"))),
    };
    if (encoding == Encoding::Rle) != (env.flags & FLAG_RLE != 0) {
        return Err(ProtocolError::Protocol("RLE flag disagrees with frame encoding".into()));
    }
    let pixels = match encoding {
        Encoding::Raw => {
            if body.len() != pixels * 3 {
                return Err(ProtocolError::Protocol(format!(
                    "raw frame has {} bytes for {w}x{h}",
                    body.len()
                )));
            }
            body.to_vec()
        }
        Encoding::Rle => rle_decode(body, pixels)?,
    };
    Ok(Frame {
        content_id: ContentId(env.content_id),
        region: Rect::new(x as i64, y as i64, w as i64, h as i64),
        encoding,
        deadline_us,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::envelope::{decode, encode};

    fn roundtrip(m: &Message) -> Message {
        let env = m.to_envelope(5).unwrap();
        let back = decode(&encode(&env).unwrap()).unwrap();
        assert_eq!(back, env);
        Message::from_envelope(&back).unwrap()
    }

    #[test]
    fn frame_subheader_layout() {
        let f = Frame {
            content_id: ContentId(3),
            region: Rect::new(1, 2, 2, 1),
            encoding: Encoding::Raw,
            deadline_us: 0x1122334455667788,
            pixels: vec![1, 2, 3, 4, 5, 6],
        };
        let env = Message::Frame(f.clone()).to_envelope(9).unwrap();
        assert_eq!(env.channel, Channel::Data);
        assert_eq!(env.content_id, 3);
        assert_eq!(env.payload.len(), 28 + 6);
        assert_eq!(&env.payload[0..16], &[1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&env.payload[16..20], &[0, 0, 0, 0]);
        assert_eq!(&env.payload[20..28], &0x1122334455667788u64.to_le_bytes());
        assert_eq!(roundtrip(&Message::Frame(f.clone())), Message::Frame(f));
    }

    #[test]
    fn rle_frames() {
        let mut pixels = vec![7u8; 300 * 3];
        pixels[0] = 1;
        let f = Frame {
            content_id: ContentId(1),
            region: Rect::new(0, 0, 30, 10),
            encoding: Encoding::Rle,
            deadline_us: 1,
            pixels,
        };
        let env = Message::Frame(f.clone()).to_envelope(1).unwrap();
        assert_eq!(env.flags & FLAG_RLE, FLAG_RLE);
        assert!(env.payload.len() < 28 + 40);
        assert_eq!(Message::from_envelope(&env).unwrap(), Message::Frame(f));
        let mut bad = env.clone();
        bad.flags = 0;
        assert!(Message::from_envelope(&bad).is_err());
    }

    #[test]
    fn rle_rejects_malformed_runs() {
        assert!(rle_decode(&[0, 1, 2, 3], 1).is_err());
        assert!(rle_decode(&[2, 1, 2, 3], 1).is_err());
        assert!(rle_decode(&[1, 1, 2, 3], 2).is_err());
        assert!(rle_decode(&[1, 1, 2], 1).is_err());
        assert_eq!(rle_decode(&rle_encode(&[5; 3 * 600]), 600).unwrap(), vec![5; 1800]);
    }

    #[test]
    fn frame_pixel_mismatch() {
        let f = Frame {
            content_id: ContentId(1),
            region: Rect::new(0, 0, 2, 2),
            encoding: Encoding::Raw,
            deadline_us: 0,
            pixels: vec![0; 11],
        };
        assert!(Message::Frame(f).to_envelope(0).is_err());
        let mut env = Envelope::new(MsgType::Frame, Channel::Data, vec![0; 28 + 5]);
        env.payload[8] = 1;
        env.payload[12] = 1;
        assert!(Message::from_envelope(&env).is_err());
    }

    #[test]
    fn command_json_shape() {
        let c = Command {
            command_id: 4,
            op: CommandOp::Place {
                content: ContentId(2),
                x: 10.0,
                y: 20.0,
                scale: 1.0,
                rotation_deg: 0.0,
            },
        };
        let v: serde_json::Value = serde_json::to_value(&c).unwrap();
        assert_eq!(v["op"], "place");
        assert_eq!(v["command_id"], 4);
        let parsed: Command =
            serde_json::from_str(r#"{"command_id":1,"op":"place","content":2,"x":5,"y":6}"#).unwrap();
        assert_eq!(
            parsed.op,
            CommandOp::Place {
                content: ContentId(2),
                x: 5.0,
                y: 6.0,
                scale: 1.0,
                rotation_deg: 0.0
            }
        );
    }

    #[test]
    fn unknown_type_is_typed_error() {
        let env = Envelope::new(MsgType::Other(99), Channel::Control, vec![]);
        assert!(matches!(Message::from_envelope(&env), Err(ProtocolError::UnknownType(99))));
        let env = Envelope::new(MsgType::Ack, Channel::Control, b"{".to_vec());
        assert!(matches!(Message::from_envelope(&env), Err(ProtocolError::Payload(_))));
    }
}
