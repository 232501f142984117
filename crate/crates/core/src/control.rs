//! The control service: node registry, the authoritative scene, command
//! execution and environment storage.
//!
//! Like the display node this is a plain state machine. Connection handlers
//! feed it `(session, message)` pairs in arrival order and deliver the
//! returned [`ControlEffect`]s.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::PathBuf;

use log::{debug, info, warn};
use thiserror::Error;

use crate::geometry::{TileGrid, TileId};
use crate::protocol::session::DEFAULT_HEARTBEAT_INTERVAL_US;
use crate::protocol::{
    Ack, Command, CommandOp, Eos, Heartbeat, Message, MsgType, Nack, ProtocolError, Register, RegistrySummary, Role,
    SceneSnapshot, Session, SessionEvent, SessionState, SnapshotReq, SourceEndpoint, SourceOffer, TileStatus,
};
use crate::scene::{load_environment, save_environment, ContentId, ContentKind, ContentObject, ContentRegistry, EnvironmentDoc, Scene, SceneError};

pub type SessionId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotConfig {
    pub max_projections: usize,
}

impl Default for SlotConfig {
    fn default() -> Self {
        SlotConfig { max_projections: 12 }
    }
}

impl SlotConfig {
    pub fn new(max_projections: usize) -> Result<Self, ControlError> {
        if max_projections == 0 {
            return Err(ControlError::Validation("max_projections must be at least 1".into()));
        }
        Ok(SlotConfig { max_projections })
    }
}

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("environment store: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

impl ControlError {
    pub fn code(&self) -> &'static str {
        match self {
            ControlError::NotFound(_) => "NotFound",
            ControlError::Validation(_) => "Validation",
            ControlError::Io(_) => "Io",
            ControlError::Scene(e) => e.code(),
        }
    }
}

/// Something for the transport layer to do.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlEffect {
    Send(SessionId, Message),
    /// Close the connection after flushing anything already queued.
    Close(SessionId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisplayEntry {
    pub session: SessionId,
    pub online: bool,
    pub last_heard_us: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceEntry {
    pub session: SessionId,
    pub name: String,
    pub role: Role,
    pub data_addr: Option<String>,
    pub online: bool,
    pub epoch: u64,
    pub offered: bool,
}

#[derive(Debug, Clone)]
struct Peer {
    session: Session,
    tile: Option<TileId>,
    content: Option<ContentId>,
}

/// Who is connected, and as what.
#[derive(Debug, Clone, Default)]
pub struct NodeRegistry {
    pub displays: BTreeMap<TileId, DisplayEntry>,
    pub sources: BTreeMap<ContentId, SourceEntry>,
    pub ui_sessions: BTreeSet<SessionId>,
}

impl NodeRegistry {
    /// Sources currently holding a slot.
    pub fn slots_used(&self) -> usize {
        self.sources.values().filter(|s| s.online).count()
    }

    pub fn display_session(&self, tile: TileId) -> Option<SessionId> {
        self.displays.get(&tile).map(|d| d.session)
    }
}

/// Named environment documents.
#[derive(Debug)]
pub enum EnvStore {
    Memory {
        docs: BTreeMap<String, String>,
        backups: BTreeMap<String, String>,
    },
    Dir(PathBuf),
}

impl EnvStore {
    pub fn memory() -> Self {
        EnvStore::Memory {
            docs: BTreeMap::new(),
            backups: BTreeMap::new(),
        }
    }

    pub fn dir(path: impl Into<PathBuf>) -> io::Result<Self> {
        let path = path.into();
        fs::create_dir_all(&path)?;
        Ok(EnvStore::Dir(path))
    }

    fn check_name(name: &str) -> Result<(), ControlError> {
        let ok = !name.is_empty()
            && name.len() <= 128
            && !name.starts_with('.')
            && name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
        if ok {
            Ok(())
        } else {
            Err(ControlError::Validation(format!("bad environment name {name:?}")))
        }
    }

    /// Stores `text` under `name`, keeping any previous version as a backup.
    pub fn save(&mut self, name: &str, text: &str) -> Result<(), ControlError> {
        Self::check_name(name)?;
        match self {
            EnvStore::Memory { docs, backups } => {
                if let Some(old) = docs.insert(name.to_string(), text.to_string()) {
                    backups.insert(name.to_string(), old);
                }
            }
            EnvStore::Dir(dir) => {
                let path = dir.join(format!("{name}.json"));
                if path.exists() {
                    fs::rename(&path, dir.join(format!("{name}.json.bak")))?;
                }
                let tmp = dir.join(format!(".{name}.json.tmp"));
                fs::write(&tmp, text)?;
                fs::rename(&tmp, &path)?;
            }
        }
        Ok(())
    }

    pub fn load(&self, name: &str) -> Result<String, ControlError> {
        Self::check_name(name)?;
        let missing = || ControlError::NotFound(format!("environment {name:?}"));
        match self {
            EnvStore::Memory { docs, .. } => docs.get(name).cloned().ok_or_else(missing),
            EnvStore::Dir(dir) => match fs::read_to_string(dir.join(format!("{name}.json"))) {
                Ok(t) => Ok(t),
                Err(e) if e.kind() == io::ErrorKind::NotFound => Err(missing()),
                Err(e) => Err(e.into()),
            },
        }
    }

    pub fn backup(&self, name: &str) -> Option<String> {
        match self {
            EnvStore::Memory { backups, .. } => backups.get(name).cloned(),
            EnvStore::Dir(dir) => fs::read_to_string(dir.join(format!("{name}.json.bak"))).ok(),
        }
    }

    pub fn list(&self) -> Result<Vec<String>, ControlError> {
        match self {
            EnvStore::Memory { docs, .. } => Ok(docs.keys().cloned().collect()),
            EnvStore::Dir(dir) => {
                let mut names = Vec::new();
                for entry in fs::read_dir(dir)? {
                    let name = entry?.file_name().to_string_lossy().into_owned();
                    if let Some(stem) = name.strip_suffix(".json") {
                        if !stem.starts_with('.') {
                            names.push(stem.to_string());
                        }
                    }
                }
                names.sort();
                Ok(names)
            }
        }
    }

    pub fn delete(&mut self, name: &str) -> Result<(), ControlError> {
        Self::check_name(name)?;
        let missing = || ControlError::NotFound(format!("environment {name:?}"));
        match self {
            EnvStore::Memory { docs, .. } => docs.remove(name).map(|_| ()).ok_or_else(missing),
            EnvStore::Dir(dir) => match fs::remove_file(dir.join(format!("{name}.json"))) {
                Ok(()) => Ok(()),
                Err(e) if e.kind() == io::ErrorKind::NotFound => Err(missing()),
                Err(e) => Err(e.into()),
            },
        }
    }
}

/// Online live contents, for re-attaching loaded layouts.
struct LiveSources<'a>(&'a Scene, &'a NodeRegistry);

impl ContentRegistry for LiveSources<'_> {
    fn live_contents(&self) -> Vec<ContentObject> {
        self.1
            .sources
            .iter()
            .filter(|(_, s)| s.online && s.offered)
            .filter_map(|(id, _)| self.0.content(*id).cloned())
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ControlCounters {
    pub commands: u64,
    pub acks: u64,
    pub nacks: u64,
    pub snapshots_sent: u64,
}

pub struct ControlService {
    scene: Scene,
    slots: SlotConfig,
    registry: NodeRegistry,
    peers: BTreeMap<SessionId, Peer>,
    envs: EnvStore,
    heartbeat_interval_us: u64,
    next_epoch: u64,
    /// UI sessions awaiting snapshot replies, with the tiles still owed.
    snapshot_waiters: BTreeMap<SessionId, BTreeSet<TileId>>,
    counters: ControlCounters,
}

fn nack(command_id: u64, code: &str, message: impl Into<String>) -> Message {
    Message::Nack(Nack {
        command_id,
        code: code.to_string(),
        message: message.into(),
    })
}

impl ControlService {
    pub fn new(wall: TileGrid, slots: SlotConfig, envs: EnvStore) -> Self {
        ControlService {
            scene: Scene::new(wall),
            slots,
            registry: NodeRegistry::default(),
            peers: BTreeMap::new(),
            envs,
            heartbeat_interval_us: DEFAULT_HEARTBEAT_INTERVAL_US,
            next_epoch: 1,
            snapshot_waiters: BTreeMap::new(),
            counters: ControlCounters::default(),
        }
    }

    pub fn with_heartbeat_interval(mut self, interval_us: u64) -> Self {
        self.heartbeat_interval_us = interval_us.max(1);
        self
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn registry(&self) -> &NodeRegistry {
        &self.registry
    }

    pub fn counters(&self) -> &ControlCounters {
        &self.counters
    }

    pub fn envs(&self) -> &EnvStore {
        &self.envs
    }

    pub fn session_state(&self, session: SessionId) -> Option<SessionState> {
        self.peers.get(&session).map(|p| p.session.state())
    }

    pub fn summary(&self) -> RegistrySummary {
        let tiles: Vec<TileStatus> = self
            .scene
            .wall()
            .tiles()
            .map(|tile| TileStatus {
                tile,
                online: self.registry.displays.get(&tile).is_some_and(|d| d.online),
            })
            .collect();
        RegistrySummary {
            wall_ready: tiles.iter().all(|t| t.online),
            tiles,
            sources: self
                .registry
                .sources
                .iter()
                .map(|(id, s)| SourceEndpoint {
                    content_id: *id,
                    name: s.name.clone(),
                    data_addr: s.data_addr.clone(),
                    online: s.online,
                    epoch: s.epoch,
                })
                .collect(),
            slots_used: self.registry.slots_used(),
            max_projections: self.slots.max_projections,
        }
    }

    pub fn snapshot(&self) -> SceneSnapshot {
        SceneSnapshot {
            scene: self.scene.without_thumbnails(),
            registry: self.summary(),
        }
    }

    /// Sessions that receive scene snapshots.
    fn audience(&self) -> Vec<SessionId> {
        let displays = self.registry.displays.values().filter(|d| d.online).map(|d| d.session);
        displays.chain(self.registry.ui_sessions.iter().copied()).collect()
    }

    fn broadcast(&mut self, out: &mut Vec<ControlEffect>) {
        let msg = Message::SceneSnapshot(Box::new(self.snapshot()));
        for s in self.audience() {
            self.counters.snapshots_sent += 1;
            out.push(ControlEffect::Send(s, msg.clone()));
        }
    }

    fn send_snapshot(&mut self, to: SessionId, out: &mut Vec<ControlEffect>) {
        self.counters.snapshots_sent += 1;
        out.push(ControlEffect::Send(to, Message::SceneSnapshot(Box::new(self.snapshot()))));
    }

    /// A new connection.
    pub fn connect(&mut self, session: SessionId, now_us: u64) {
        let s = Session::new(None, now_us).with_heartbeat_interval(self.heartbeat_interval_us);
        self.peers.insert(
            session,
            Peer {
                session: s,
                tile: None,
                content: None,
            },
        );
    }

    /// Handles one inbound message.
    pub fn handle(&mut self, session: SessionId, msg: Message, now_us: u64) -> Vec<ControlEffect> {
        let mut out = Vec::new();
        if !self.peers.contains_key(&session) {
            self.connect(session, now_us);
        }
        let peer = self.peers.get_mut(&session).expect("peer exists");
        let checked = if let Message::Register(_) = msg {
            Ok(peer.session.state())
        } else {
            peer.session.on_receive(msg.msg_type(), now_us)
        };
        if let Err(e) = checked {
            warn!("session {session}: {e}");
            self.protocol_violation(session, &msg, e, now_us, &mut out);
            return out;
        }
        self.mark_heard(session, now_us, &mut out);
        match msg {
            Message::Register(r) => self.handle_register(session, r, now_us, &mut out),
            Message::Heartbeat(hb) => {
                let t = now_us as i64;
                out.push(ControlEffect::Send(
                    session,
                    Message::Heartbeat(Heartbeat {
                        t1: hb.t1,
                        t2: Some(t),
                        t3: Some(t),
                    }),
                ));
            }
            Message::Command(c) => self.handle_command(session, c, &mut out),
            Message::SourceOffer(o) => self.handle_offer(session, o, &mut out),
            Message::Eos(e) => self.handle_eos(session, e, &mut out),
            Message::SnapshotReq(req) => self.handle_snapshot_req(session, req, &mut out),
            Message::SnapshotRsp(rsp) => {
                for (ui, owed) in self.snapshot_waiters.iter_mut() {
                    if owed.remove(&rsp.tile) {
                        out.push(ControlEffect::Send(*ui, Message::SnapshotRsp(rsp.clone())));
                    }
                }
                self.snapshot_waiters.retain(|_, owed| !owed.is_empty());
            }
            Message::Ack(_) | Message::Nack(_) | Message::SceneSnapshot(_) => {
                debug!("session {session}: ignoring {:?}", msg.msg_type());
            }
            Message::Subscribe(_) | Message::Unsubscribe(_) | Message::Frame(_) => {
                let e = ProtocolError::Protocol("data-plane message sent to control".into());
                self.protocol_violation(session, &msg, e, now_us, &mut out);
            }
        }
        out
    }

    fn protocol_violation(
        &mut self,
        session: SessionId,
        msg: &Message,
        err: ProtocolError,
        now_us: u64,
        out: &mut Vec<ControlEffect>,
    ) {
        let command_id = match msg {
            Message::Command(c) => {
                self.counters.commands += 1;
                self.counters.nacks += 1;
                c.command_id
            }
            _ => 0,
        };
        out.push(ControlEffect::Send(session, nack(command_id, err.code(), err.to_string())));
        self.disconnect(session, now_us, out);
        out.push(ControlEffect::Close(session));
    }

    /// Records that `session` was heard from, bringing its node back online.
    fn mark_heard(&mut self, session: SessionId, now_us: u64, out: &mut Vec<ControlEffect>) {
        let (tile, content) = (self.peers[&session].tile, self.peers[&session].content);
        if let Some(tile) = tile {
            if let Some(d) = self.registry.displays.get_mut(&tile).filter(|d| d.session == session) {
                d.last_heard_us = now_us;
                if !d.online {
                    d.online = true;
                    info!("display {tile} back online");
                    self.send_snapshot(session, out);
                }
            }
        }
        if let Some(content) = content {
            let resumes = self.registry.sources.get(&content).is_some_and(|s| s.session == session && !s.online);
            if resumes && self.registry.slots_used() < self.slots.max_projections {
                let s = self.registry.sources.get_mut(&content).expect("checked");
                s.online = true;
                info!("source {} back online", s.name);
                if s.offered && self.scene.set_content_online(content, true).unwrap_or(false) {
                    self.broadcast(out);
                }
            }
        }
    }

    fn handle_register(&mut self, session: SessionId, r: Register, now_us: u64, out: &mut Vec<ControlEffect>) {
        let peer = self.peers.get_mut(&session).expect("peer exists");
        if let Err(e) = peer.session.register(r.role) {
            out.push(ControlEffect::Send(session, nack(0, e.code(), e.to_string())));
            out.push(ControlEffect::Close(session));
            return;
        }
        let verdict = match r.role {
            Role::Display => self.register_display(session, &r, now_us, out),
            Role::Sender | Role::Streamer => self.register_source(session, &r),
            Role::Ui => {
                self.registry.ui_sessions.insert(session);
                Ok(Ack::default())
            }
            Role::Control => Err(("Validation", "control cannot register with itself".to_string())),
        };
        let peer = self.peers.get_mut(&session).expect("peer exists");
        match verdict {
            Ok(ack) => {
                peer.session.apply(SessionEvent::Accepted).expect("registered session accepts");
                out.push(ControlEffect::Send(session, Message::Ack(ack)));
                if matches!(r.role, Role::Display | Role::Ui) {
                    self.send_snapshot(session, out);
                }
                if r.role == Role::Display {
                    // displays pass through Syncing on their side only
                    let p = self.peers.get_mut(&session).expect("peer exists");
                    p.session.apply(SessionEvent::Message(MsgType::SceneSnapshot)).ok();
                    self.broadcast_registry_to_uis(out);
                }
            }
            Err((code, message)) => {
                peer.session.apply(SessionEvent::Rejected).ok();
                info!("session {session}: registration refused: {code}");
                out.push(ControlEffect::Send(session, nack(0, code, message)));
                out.push(ControlEffect::Close(session));
            }
        }
    }

    fn broadcast_registry_to_uis(&mut self, out: &mut Vec<ControlEffect>) {
        let uis: Vec<_> = self.registry.ui_sessions.iter().copied().collect();
        for ui in uis {
            self.send_snapshot(ui, out);
        }
    }

    fn register_display(
        &mut self,
        session: SessionId,
        r: &Register,
        now_us: u64,
        out: &mut Vec<ControlEffect>,
    ) -> Result<Ack, (&'static str, String)> {
        let tile = r.tile.ok_or(("Validation", "display registration needs a tile".to_string()))?;
        if !self.scene.wall().contains_tile(tile) {
            return Err(("Validation", format!("tile {tile} is not on this wall")));
        }
        if let Some(prev) = self.registry.displays.get(&tile) {
            if prev.online && prev.session != session {
                return Err(("DuplicateTile", format!("tile {tile} already has a live display")));
            }
            if prev.session != session {
                info!("display {tile}: session {} replaced by {session}", prev.session);
                let old = prev.session;
                self.peers.remove(&old);
                out.push(ControlEffect::Close(old));
            }
        }
        self.registry.displays.insert(
            tile,
            DisplayEntry {
                session,
                online: true,
                last_heard_us: now_us,
            },
        );
        self.peers.get_mut(&session).expect("peer exists").tile = Some(tile);
        Ok(Ack::default())
    }

    fn register_source(&mut self, session: SessionId, r: &Register) -> Result<Ack, (&'static str, String)> {
        let name = r.name.clone().unwrap_or_else(|| format!("source-{session}"));
        let existing = self.registry.sources.iter().find(|(_, s)| s.name == name).map(|(id, s)| (*id, s.online));
        if let Some((_, true)) = existing {
            return Err(("Validation", format!("source name {name:?} is already live")));
        }
        if self.registry.slots_used() >= self.slots.max_projections {
            return Err((
                "SlotsExhausted",
                format!("all {} projection slots are in use", self.slots.max_projections),
            ));
        }
        let content = match existing {
            Some((id, _)) => {
                let old = self.registry.sources[&id].session;
                if let Some(p) = self.peers.get_mut(&old) {
                    p.content = None;
                }
                id
            }
            None => self.scene.allocate_content_id(),
        };
        let epoch = self.next_epoch;
        self.next_epoch += 1;
        self.registry.sources.insert(
            content,
            SourceEntry {
                session,
                name,
                role: r.role,
                data_addr: r.capabilities.data_addr.clone(),
                online: true,
                epoch,
                offered: false,
            },
        );
        self.peers.get_mut(&session).expect("peer exists").content = Some(content);
        Ok(Ack {
            content_id: Some(content),
            ..Ack::default()
        })
    }

    fn handle_offer(&mut self, session: SessionId, o: SourceOffer, out: &mut Vec<ControlEffect>) {
        let owned = self.peers[&session].content == Some(o.content_id);
        if !owned {
            out.push(ControlEffect::Send(
                session,
                nack(0, "Validation", format!("content {} is not yours", o.content_id)),
            ));
            return;
        }
        if !o.kind.is_live() {
            out.push(ControlEffect::Send(session, nack(0, "Validation", "sources offer live content only")));
            return;
        }
        let entry = self.registry.sources.get_mut(&o.content_id).expect("owned content is registered");
        let mut obj = ContentObject::new(o.content_id, o.kind, o.natural_w, o.natural_h, entry.name.clone());
        obj.thumbnail = o.thumbnail.clone();
        obj.online = entry.online;
        if let Err(e) = self.scene.upsert_content(obj) {
            out.push(ControlEffect::Send(session, nack(0, e.code(), e.to_string())));
            return;
        }
        entry.offered = true;
        for ui in &self.registry.ui_sessions {
            out.push(ControlEffect::Send(*ui, Message::SourceOffer(o.clone())));
        }
        self.broadcast(out);
    }

    fn handle_eos(&mut self, session: SessionId, e: Eos, out: &mut Vec<ControlEffect>) {
        if self.peers[&session].content != Some(e.content_id) {
            return;
        }
        self.source_offline(e.content_id, out);
        for ui in &self.registry.ui_sessions {
            out.push(ControlEffect::Send(*ui, Message::Eos(e.clone())));
        }
    }

    fn source_offline(&mut self, content: ContentId, out: &mut Vec<ControlEffect>) {
        let Some(s) = self.registry.sources.get_mut(&content) else { return };
        if !s.online {
            return;
        }
        s.online = false;
        info!("source {} offline", s.name);
        if self.scene.set_content_online(content, false).unwrap_or(false) {
            self.broadcast(out);
        }
    }

    fn handle_snapshot_req(&mut self, session: SessionId, req: SnapshotReq, out: &mut Vec<ControlEffect>) {
        if !self.registry.ui_sessions.contains(&session) {
            return;
        }
        let online: Vec<_> = self.registry.displays.iter().filter(|(_, d)| d.online).collect();
        if online.is_empty() {
            return;
        }
        self.snapshot_waiters.entry(session).or_default().extend(online.iter().map(|(t, _)| **t));
        for (_, d) in online {
            out.push(ControlEffect::Send(d.session, Message::SnapshotReq(req)));
        }
    }

    fn handle_command(&mut self, session: SessionId, c: Command, out: &mut Vec<ControlEffect>) {
        self.counters.commands += 1;
        if !self.registry.ui_sessions.contains(&session) {
            self.counters.nacks += 1;
            out.push(ControlEffect::Send(
                session,
                nack(c.command_id, "Protocol", "commands are accepted from ui sessions only"),
            ));
            return;
        }
        let mutates = c.op.mutates_scene();
        match self.execute(&c) {
            Ok(mut ack) => {
                self.counters.acks += 1;
                ack.command_id = c.command_id;
                if mutates {
                    ack.revision = Some(self.scene.revision());
                }
                out.push(ControlEffect::Send(session, Message::Ack(ack)));
                if mutates {
                    self.broadcast(out);
                }
            }
            Err(e) => {
                self.counters.nacks += 1;
                debug!("command {} refused: {e}", c.command_id);
                out.push(ControlEffect::Send(session, nack(c.command_id, e.code(), e.to_string())));
            }
        }
    }

    /// Runs one command against the scene. Failed commands leave the scene
    /// untouched.
    pub fn execute(&mut self, c: &Command) -> Result<Ack, ControlError> {
        let mut ack = Ack {
            command_id: c.command_id,
            ..Ack::default()
        };
        match &c.op {
            CommandOp::AddContent {
                kind,
                natural_w,
                natural_h,
                source_ref,
            } => {
                if kind.is_live() {
                    return Err(ControlError::Validation("live content is added by its source".into()));
                }
                if *kind == ContentKind::TestPattern {
                    source_ref
                        .parse::<crate::raster::Pattern>()
                        .map_err(|e| ControlError::Validation(e.to_string()))?;
                }
                let id = self.scene.register_content(*kind, *natural_w, *natural_h, source_ref.clone(), None)?;
                ack.content_id = Some(id);
            }
            CommandOp::Place {
                content,
                x,
                y,
                scale,
                rotation_deg,
            } => {
                ack.placement_id = Some(self.scene.place(*content, *x, *y, *scale, *rotation_deg)?);
            }
            CommandOp::Move { placement, x, y } => self.scene.move_to(*placement, *x, *y)?,
            CommandOp::Resize { placement, scale } => self.scene.resize(*placement, *scale)?,
            CommandOp::Rotate { placement, rotation_deg } => self.scene.rotate(*placement, *rotation_deg)?,
            CommandOp::SetZ { placement, direction } => self.scene.set_z(*placement, *direction)?,
            CommandOp::Remove { placement } => self.scene.remove(*placement)?,
            CommandOp::Save { name } => {
                let doc = save_environment(&self.scene);
                self.envs.save(name, &doc.to_json())?;
            }
            CommandOp::Load { name } => {
                let doc = EnvironmentDoc::from_json(&self.envs.load(name)?)?;
                let loaded = load_environment(&doc, &LiveSources(&self.scene, &self.registry), self.scene.wall())?;
                let mut scene = loaded.scene;
                scene.rebase_revision(self.scene.revision() + 1);
                self.scene = scene;
                ack.warnings = loaded.warnings;
            }
            CommandOp::ListEnvironments => ack.environments = Some(self.envs.list()?),
            CommandOp::DeleteEnvironment { name } => self.envs.delete(name)?,
        }
        Ok(ack)
    }

    /// The connection to `session` is gone.
    pub fn disconnected(&mut self, session: SessionId, now_us: u64) -> Vec<ControlEffect> {
        let mut out = Vec::new();
        self.disconnect(session, now_us, &mut out);
        out
    }

    fn disconnect(&mut self, session: SessionId, _now_us: u64, out: &mut Vec<ControlEffect>) {
        let Some(mut peer) = self.peers.remove(&session) else { return };
        peer.session.apply(SessionEvent::Close).ok();
        self.registry.ui_sessions.remove(&session);
        self.snapshot_waiters.remove(&session);
        if let Some(tile) = peer.tile {
            if let Some(d) = self.registry.displays.get_mut(&tile).filter(|d| d.session == session) {
                d.online = false;
                info!("display {tile} disconnected");
                self.broadcast_registry_to_uis(out);
            }
        }
        if let Some(content) = peer.content {
            if self.registry.sources.get(&content).is_some_and(|s| s.session == session) {
                self.source_offline(content, out);
            }
        }
    }

    /// Flags nodes that missed three heartbeats as offline. Their sessions
    /// stay open; hearing from them again brings them back.
    pub fn liveness_sweep(&mut self, now_us: u64) -> Vec<ControlEffect> {
        let mut out = Vec::new();
        let limit = 3 * self.heartbeat_interval_us;
        let silent = |last: u64| now_us.saturating_sub(last) >= limit;
        let mut tiles_changed = false;
        for (tile, d) in self.registry.displays.iter_mut() {
            if d.online && silent(d.last_heard_us) {
                d.online = false;
                tiles_changed = true;
                info!("display {tile} missed heartbeats");
            }
        }
        let stale_sources: Vec<ContentId> = self
            .registry
            .sources
            .iter()
            .filter(|(_, s)| s.online)
            .filter(|(_, s)| self.peers.get(&s.session).map_or(true, |p| silent(p.session.last_heard_us())))
            .map(|(id, _)| *id)
            .collect();
        for id in stale_sources {
            self.source_offline(id, &mut out);
        }
        if tiles_changed {
            self.broadcast_registry_to_uis(&mut out);
        }
        out
    }
}
