//! JSON text messages exchanged with operator UIs over WebSocket.
//!
//! Each WebSocket text message is one object tagged by `"type"`. A UI sends
//! `command` and `snapshot_req`; it receives scene snapshots, ACK/NACK
//! replies, source offers, end-of-stream notices and snapshot responses.
//! Text the server cannot parse is answered with a NACK whose
//! `command_id` is 0.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use tilewall::protocol::{Ack, Command, Eos, Message, Nack, SceneSnapshot, SnapshotReq, SnapshotRsp, SourceOffer};

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum UiMessage {
    Command(Command),
    SnapshotReq(SnapshotReq),
    SceneSnapshot(Box<SceneSnapshot>),
    Ack(Ack),
    Nack(Nack),
    SourceOffer(SourceOffer),
    Eos(Eos),
    SnapshotRsp(SnapshotRsp),
}

impl UiMessage {
    pub fn parse(text: &str) -> Result<UiMessage, String> {
        // Dispatched by hand: serde's internally tagged enums cannot read
        // integer-keyed maps back, which scene snapshots contain.
        let mut value: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let obj = value.as_object_mut().ok_or("expected a JSON object")?;
        let tag = match obj.remove("type") {
            Some(Value::String(t)) => t,
            _ => return Err("missing field `type`".into()),
        };
        fn body<T: DeserializeOwned>(v: Value) -> Result<T, String> {
            serde_json::from_value(v).map_err(|e| e.to_string())
        }
        Ok(match tag.as_str() {
            "command" => UiMessage::Command(body(value)?),
            "snapshot_req" => UiMessage::SnapshotReq(body(value)?),
            "scene_snapshot" => UiMessage::SceneSnapshot(body(value)?),
            "ack" => UiMessage::Ack(body(value)?),
            "nack" => UiMessage::Nack(body(value)?),
            "source_offer" => UiMessage::SourceOffer(body(value)?),
            "eos" => UiMessage::Eos(body(value)?),
            "snapshot_rsp" => UiMessage::SnapshotRsp(body(value)?),
            other => return Err(format!("unknown message type `{other}`")),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("ui message serializes")
    }

    /// The wall-protocol message a UI request stands for.
    pub fn into_request(self) -> Option<Message> {
        match self {
            UiMessage::Command(c) => Some(Message::Command(c)),
            UiMessage::SnapshotReq(r) => Some(Message::SnapshotReq(r)),
            _ => None,
        }
    }

    /// What a UI is shown for a control message; heartbeats and data-plane
    /// traffic have no UI form.
    pub fn from_message(msg: Message) -> Option<UiMessage> {
        Some(match msg {
            Message::SceneSnapshot(s) => UiMessage::SceneSnapshot(s),
            Message::Ack(a) => UiMessage::Ack(a),
            Message::Nack(n) => UiMessage::Nack(n),
            Message::SourceOffer(o) => UiMessage::SourceOffer(o),
            Message::Eos(e) => UiMessage::Eos(e),
            Message::SnapshotRsp(r) => UiMessage::SnapshotRsp(r),
            _ => return None,
        })
    }
}
