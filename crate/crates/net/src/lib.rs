//! Runs the sans-IO node state machines over real sockets: framed TCP for
//! the wall protocol and JSON over WebSocket for operator UIs.

pub mod conn;
pub mod control;
pub mod display;
pub mod source;
pub mod ui;

use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;
use tilewall::protocol::ProtocolError;

pub use control::{spawn_control, ControlHandle, ControlRuntimeConfig};
pub use display::{run_display, DisplayRuntimeConfig};
pub use source::{run_source, SourceRuntimeConfig};
pub use ui::UiMessage;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("websocket: {0}")]
    WebSocket(String),
    #[error("registration refused: {code}: {message}")]
    Refused { code: String, message: String },
    #[error("connection closed")]
    Closed,
}

/// Wall-clock microseconds since the Unix epoch. Nodes only ever compare
/// clocks through the heartbeat offset estimate, so skew between hosts is
/// tolerated.
pub fn now_us() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros() as i64)
        .unwrap_or(0)
}
