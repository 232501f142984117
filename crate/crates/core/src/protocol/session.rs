//! Connection lifecycle.
//!
//! `Connecting → Registered → Active → Draining → Closed`, with display
//! sessions passing through `Syncing` until their first scene snapshot. Both
//! ends of a connection run the same table over the same events.

use super::envelope::MsgType;
use super::messages::Role;
use super::ProtocolError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Connecting,
    Registered,
    Syncing,
    Active,
    Draining,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionEvent {
    /// REGISTER sent or received.
    Register,
    /// Registration acknowledged.
    Accepted,
    /// Registration refused.
    Rejected,
    /// Any other message sent or received.
    Message(MsgType),
    Drain,
    Close,
    HeartbeatTimeout,
}

fn violation(role: Option<Role>, state: SessionState, event: SessionEvent) -> ProtocolError {
    ProtocolError::Protocol(format!("{event:?} not allowed in {state:?} (role {role:?})"))
}

/// The transition table. `role` is `None` until the peer has registered.
pub fn transition(role: Option<Role>, state: SessionState, event: SessionEvent) -> Result<SessionState, ProtocolError> {
    use MsgType as M;
    use SessionEvent as E;
    use SessionState as S;
    match (state, event) {
        (S::Closed, _) => Err(violation(role, state, event)),
        (_, E::Close) | (_, E::HeartbeatTimeout) => Ok(S::Closed),
        (_, E::Message(M::Other(_))) => Ok(state),

        (S::Connecting, E::Register) => Ok(S::Registered),

        (S::Registered, E::Accepted) => Ok(if role == Some(Role::Display) { S::Syncing } else { S::Active }),
        (S::Registered, E::Rejected) => Ok(S::Closed),
        (S::Registered, E::Message(M::Heartbeat | M::Ack | M::Nack)) => Ok(S::Registered),

        (S::Syncing, E::Message(M::SceneSnapshot)) => Ok(S::Active),
        (S::Syncing, E::Message(M::Heartbeat | M::Ack | M::Nack | M::SnapshotReq | M::SnapshotRsp)) => Ok(S::Syncing),
        (S::Syncing, E::Drain) => Ok(S::Draining),

        (S::Active, E::Message(M::Register)) => Err(violation(role, state, event)),
        (S::Active, E::Message(_)) => Ok(S::Active),
        (S::Active, E::Drain) => Ok(S::Draining),

        (S::Draining, E::Message(M::Heartbeat | M::Ack | M::Nack | M::Eos | M::Frame | M::Unsubscribe | M::SnapshotRsp)) => {
            Ok(S::Draining)
        }

        _ => Err(violation(role, state, event)),
    }
}

/// One end of a connection.
#[derive(Debug, Clone)]
pub struct Session {
    role: Option<Role>,
    state: SessionState,
    last_heard_us: u64,
    heartbeat_interval_us: u64,
}

pub const DEFAULT_HEARTBEAT_INTERVAL_US: u64 = 1_000_000;
pub const MISSED_HEARTBEATS_TO_CLOSE: u64 = 3;

impl Session {
    pub fn new(role: Option<Role>, now_us: u64) -> Self {
        Session {
            role,
            state: SessionState::Connecting,
            last_heard_us: now_us,
            heartbeat_interval_us: DEFAULT_HEARTBEAT_INTERVAL_US,
        }
    }

    pub fn with_heartbeat_interval(mut self, interval_us: u64) -> Self {
        self.heartbeat_interval_us = interval_us.max(1);
        self
    }

    pub fn role(&self) -> Option<Role> {
        self.role
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn is_active(&self) -> bool {
        self.state == SessionState::Active
    }

    pub fn last_heard_us(&self) -> u64 {
        self.last_heard_us
    }

    pub fn apply(&mut self, event: SessionEvent) -> Result<SessionState, ProtocolError> {
        let next = transition(self.role, self.state, event)?;
        self.state = next;
        Ok(next)
    }

    /// Registration from the peer (or by us), fixing the role.
    pub fn register(&mut self, role: Role) -> Result<SessionState, ProtocolError> {
        if self.state != SessionState::Connecting {
            return Err(violation(Some(role), self.state, SessionEvent::Register));
        }
        self.role = Some(role);
        self.apply(SessionEvent::Register)
    }

    /// Records an inbound message and checks that it is legal now.
    pub fn on_receive(&mut self, msg_type: MsgType, now_us: u64) -> Result<SessionState, ProtocolError> {
        let next = self.apply(SessionEvent::Message(msg_type))?;
        self.last_heard_us = self.last_heard_us.max(now_us);
        Ok(next)
    }

    /// Whether the peer has been silent for the full timeout.
    pub fn heartbeat_expired(&self, now_us: u64) -> bool {
        now_us.saturating_sub(self.last_heard_us) >= MISSED_HEARTBEATS_TO_CLOSE * self.heartbeat_interval_us
    }

    /// Closes the session if the peer missed too many heartbeats.
    pub fn check_liveness(&mut self, now_us: u64) -> bool {
        if self.state != SessionState::Closed && self.heartbeat_expired(now_us) {
            self.state = SessionState::Closed;
            return true;
        }
        false
    }
}
