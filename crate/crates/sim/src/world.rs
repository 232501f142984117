//! The simulated deployment: one control service, one display node per tile,
//! any number of sources and a scripted operator, all exchanging encoded
//! protocol bytes over modelled links on a virtual clock.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::path::PathBuf;

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use tilewall::control::{ControlEffect, ControlService, EnvStore, SessionId, SlotConfig};
use tilewall::display::{DisplayEffect, DisplayNode, FrameOutcome};
use tilewall::geometry::{build_wall, TileGrid, TileId, WallConfig};
use tilewall::protocol::{
    decode, encode, Ack, Command, CommandOp, Heartbeat, Message, MsgType, Nack, Register, Role, SceneSnapshot,
    Sequencer, SnapshotMode, SourceOffer, Subscribe, Unsubscribe,
};
use tilewall::raster::Raster;
use tilewall::scene::{ContentId, ContentKind};
use tilewall::source::{FrameProvider, Pacer, PacingConfig, SourceClient, SourceConfig, SourceEffect, SourceError, SourceState};

use crate::net::NetModel;
use crate::SimError;

pub const MS: u64 = 1_000_000;

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub wall: WallConfig,
    pub net: NetModel,
    pub seed: u64,
    pub max_projections: usize,
    pub heartbeat_interval_ms: u64,
    /// Local clock of each display relative to the control clock.
    pub clock_offsets_us: BTreeMap<TileId, i64>,
    pub pyramid_root: Option<PathBuf>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            wall: WallConfig::reference_wall(),
            net: NetModel::default(),
            seed: 0,
            max_projections: SlotConfig::default().max_projections,
            heartbeat_interval_ms: 1000,
            clock_offsets_us: BTreeMap::new(),
            pyramid_root: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Node {
    Control,
    Ui,
    Display(TileId),
    Source(usize),
}

#[derive(Debug)]
enum Event {
    /// `conn` is the session of the non-control end (the display end on
    /// data links); deliveries to a replaced session are dropped.
    Deliver { from: Node, to: Node, conn: SessionId, bytes: Vec<u8> },
    DisplayTimer(TileId),
    SourceTick(usize),
    Heartbeat(Node),
    Sweep,
}

struct Scheduled {
    at: u64,
    order: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.order) == (other.at, other.order)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.order).cmp(&(self.at, self.order))
    }
}

#[derive(Debug, Default)]
struct Link {
    busy_until: u64,
    last_ordered: u64,
}

/// FRAME traffic received by one display for one content.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ContentBytes {
    pub frames: u64,
    pub wire_bytes: u64,
    /// Subscribed area × 3 for each frame that arrived while subscribed.
    pub subscribed_bytes: u64,
    /// Wire bytes of frames that arrived with no subscription in place.
    pub unsubscribed_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct NetStats {
    pub messages: u64,
    pub bytes: u64,
    pub frames_lost: u64,
    pub frames_reordered: u64,
    pub decode_errors: u64,
}

struct DisplaySim {
    node: DisplayNode,
    session: SessionId,
    alive: bool,
    clock_offset_us: i64,
    registered: Option<Result<(), String>>,
    revision_at: BTreeMap<u64, u64>,
    bytes: BTreeMap<ContentId, ContentBytes>,
    last_presented: BTreeMap<ContentId, u64>,
    monotonic_violations: u64,
    protocol_errors: u64,
}

struct SourceSim {
    name: String,
    client: SourceClient,
    session: SessionId,
    alive: bool,
    fps: Option<u32>,
    pacer: Option<Pacer>,
    emissions: Vec<u64>,
    exit_code: Option<i32>,
    refusal: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CommandResult {
    Ack(Ack),
    Nack(Nack),
}

impl CommandResult {
    pub fn is_ack(&self) -> bool {
        matches!(self, CommandResult::Ack(_))
    }

    pub fn code(&self) -> &str {
        match self {
            CommandResult::Ack(_) => "ACK",
            CommandResult::Nack(n) => &n.code,
        }
    }
}

#[derive(Debug, Default)]
struct UiState {
    session: SessionId,
    next_command: u64,
    sent_at: BTreeMap<u64, u64>,
    results: BTreeMap<u64, (CommandResult, u64)>,
    snapshot: Option<SceneSnapshot>,
    offers: Vec<SourceOffer>,
    eos: Vec<ContentId>,
}

/// How a source is published.
pub struct PublishSpec {
    pub name: String,
    pub role: Role,
    pub provider: FrameProvider,
    /// Frame rate for streamers; senders push their still on subscription.
    pub fps: u32,
    pub latency_budget_us: u64,
    pub thumbnail: bool,
}

pub struct Sim {
    now: u64,
    order: u64,
    queue: BinaryHeap<Scheduled>,
    rng: ChaCha8Rng,
    net: NetModel,
    grid: TileGrid,
    control: ControlService,
    sequencers: BTreeMap<Node, Sequencer>,
    links: BTreeMap<(Node, Node), Link>,
    sessions: BTreeMap<SessionId, Node>,
    next_session: SessionId,
    ui: UiState,
    displays: BTreeMap<TileId, DisplaySim>,
    sources: Vec<SourceSim>,
    hb_interval_ns: u64,
    pyramid_root: Option<PathBuf>,
    presented_this_batch: bool,
    skew: BTreeMap<ContentId, u64>,
    skew_samples: u64,
    stats: NetStats,
}

impl Sim {
    pub fn new(config: SimConfig) -> Result<Sim, SimError> {
        config.net.validate()?;
        let grid = build_wall(&config.wall)?;
        let slots = SlotConfig::new(config.max_projections).map_err(|e| SimError::Scenario(e.to_string()))?;
        let hb_interval_ns = config.heartbeat_interval_ms.max(1) * MS;
        let control = ControlService::new(grid.clone(), slots, EnvStore::memory()).with_heartbeat_interval(hb_interval_ns / 1000);
        let mut sim = Sim {
            now: 0,
            order: 0,
            queue: BinaryHeap::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            net: config.net,
            grid: grid.clone(),
            control,
            sequencers: BTreeMap::new(),
            links: BTreeMap::new(),
            sessions: BTreeMap::new(),
            next_session: 1,
            ui: UiState::default(),
            displays: BTreeMap::new(),
            sources: Vec::new(),
            hb_interval_ns,
            pyramid_root: config.pyramid_root.clone(),
            presented_this_batch: false,
            skew: BTreeMap::new(),
            skew_samples: 0,
            stats: NetStats::default(),
        };
        sim.ui.session = sim.open_session(Node::Ui);
        sim.send(Node::Ui, Node::Control, reg(Role::Ui, None, None, None), None);
        for tile in grid.tiles() {
            let offset = config.clock_offsets_us.get(&tile).copied().unwrap_or(0);
            sim.start_display(tile, offset);
        }
        sim.schedule(hb_interval_ns, Event::Sweep);
        sim.schedule(0, Event::Heartbeat(Node::Ui));
        Ok(sim)
    }

    fn open_session(&mut self, node: Node) -> SessionId {
        let s = self.next_session;
        self.next_session += 1;
        self.sessions.insert(s, node);
        s
    }

    fn start_display(&mut self, tile: TileId, clock_offset_us: i64) {
        let session = self.open_session(Node::Display(tile));
        let node = DisplayNode::new(self.grid.clone(), tile, self.pyramid_root.clone());
        self.displays.insert(
            tile,
            DisplaySim {
                node,
                session,
                alive: true,
                clock_offset_us,
                registered: None,
                revision_at: BTreeMap::new(),
                bytes: BTreeMap::new(),
                last_presented: BTreeMap::new(),
                monotonic_violations: 0,
                protocol_errors: 0,
            },
        );
        self.send(Node::Display(tile), Node::Control, reg(Role::Display, Some(tile), None, None), None);
        self.schedule(self.now, Event::Heartbeat(Node::Display(tile)));
    }

    pub fn now_ns(&self) -> u64 {
        self.now
    }

    pub fn grid(&self) -> &TileGrid {
        &self.grid
    }

    pub fn control(&self) -> &ControlService {
        &self.control
    }

    pub fn net_stats(&self) -> &NetStats {
        &self.stats
    }

    pub fn set_net(&mut self, net: NetModel) -> Result<(), SimError> {
        net.validate()?;
        self.net = net;
        Ok(())
    }

    fn schedule(&mut self, at: u64, event: Event) {
        self.order += 1;
        self.queue.push(Scheduled {
            at: at.max(self.now),
            order: self.order,
            event,
        });
    }

    fn conn_of(&self, from: Node, to: Node) -> SessionId {
        let end = match (from, to) {
            (Node::Display(_), _) => from,
            (_, Node::Display(_)) => to,
            (Node::Control, other) => other,
            (other, _) => other,
        };
        match end {
            Node::Ui => self.ui.session,
            Node::Display(t) => self.displays[&t].session,
            Node::Source(i) => self.sources[i].session,
            Node::Control => 0,
        }
    }

    /// Encodes and schedules delivery of one message.
    fn send(&mut self, from: Node, to: Node, msg: Message, seq: Option<u64>) {
        let seq = match seq {
            Some(s) => s,
            None => self
                .sequencers
                .entry(from)
                .or_default()
                .next(msg.content_id(), msg.channel()),
        };
        let bytes = match msg.to_envelope(seq).and_then(|e| encode(&e)) {
            Ok(b) => b,
            Err(e) => {
                warn!("{from:?} -> {to:?}: cannot encode {:?}: {e}", msg.msg_type());
                return;
            }
        };
        let conn = self.conn_of(from, to);
        let is_frame = msg.msg_type() == MsgType::Frame;
        let tx = self.net.transmit_ns(bytes.len());
        let latency = self.net.latency_ms.sample_ns(&mut self.rng);
        let link = self.links.entry((from, to)).or_default();
        let start = self.now.max(link.busy_until);
        link.busy_until = start + tx;
        let mut arrival = start + tx + latency;
        self.stats.messages += 1;
        self.stats.bytes += bytes.len() as u64;
        if is_frame {
            if self.net.loss_pct > 0.0 && self.rng.gen_bool(self.net.loss_pct / 100.0) {
                self.stats.frames_lost += 1;
                return;
            }
            if self.net.reorder_pct > 0.0 && self.rng.gen_bool(self.net.reorder_pct / 100.0) {
                self.stats.frames_reordered += 1;
                arrival += self.rng.gen_range(1..=40) * MS;
            }
        } else {
            arrival = arrival.max(link.last_ordered);
            link.last_ordered = arrival;
        }
        self.schedule(arrival, Event::Deliver { from, to, conn, bytes });
    }

    /// Runs every event up to and including `t_ns`.
    pub fn run_until(&mut self, t_ns: u64) {
        while let Some(next) = self.queue.peek() {
            if next.at > t_ns {
                break;
            }
            let s = self.queue.pop().expect("peeked");
            self.now = s.at;
            self.dispatch(s.event);
            let batch_done = self.queue.peek().map_or(true, |n| n.at != self.now);
            if batch_done && self.presented_this_batch {
                self.sample_skew();
                self.presented_this_batch = false;
            }
        }
        self.now = self.now.max(t_ns);
    }

    pub fn run_for(&mut self, dt_ns: u64) {
        self.run_until(self.now + dt_ns);
    }

    fn dispatch(&mut self, event: Event) {
        match event {
            Event::Deliver { from, to, conn, bytes } => self.deliver(from, to, conn, bytes),
            Event::DisplayTimer(tile) => self.display_timer(tile),
            Event::SourceTick(i) => self.source_tick(i),
            Event::Heartbeat(node) => self.heartbeat(node),
            Event::Sweep => {
                let fx = self.control.liveness_sweep(self.now / 1000);
                self.apply_control_effects(fx);
                self.schedule(self.now + self.hb_interval_ns, Event::Sweep);
            }
        }
    }

    fn heartbeat(&mut self, node: Node) {
        let alive = match node {
            Node::Display(t) => self.displays[&t].alive,
            Node::Source(i) => self.sources[i].alive,
            Node::Ui => true,
            Node::Control => false,
        };
        if !alive {
            return;
        }
        let t1 = self.local_us(node);
        self.send(node, Node::Control, Message::Heartbeat(Heartbeat { t1, t2: None, t3: None }), None);
        self.schedule(self.now + self.hb_interval_ns, Event::Heartbeat(node));
    }

    fn local_us(&self, node: Node) -> i64 {
        let base = (self.now / 1000) as i64;
        match node {
            Node::Display(t) => base + self.displays[&t].clock_offset_us,
            _ => base,
        }
    }

    fn deliver(&mut self, from: Node, to: Node, conn: SessionId, bytes: Vec<u8>) {
        let decoded = decode(&bytes).and_then(|env| Message::from_envelope(&env).map(|m| (env.sequence, m)));
        let (seq, msg) = match decoded {
            Ok(x) => x,
            Err(e) => {
                self.stats.decode_errors += 1;
                warn!("{from:?} -> {to:?}: {e}");
                return;
            }
        };
        match to {
            Node::Control => {
                let live = self.sessions.contains_key(&conn) && self.sender_alive(from, conn);
                if !live {
                    return;
                }
                let fx = self.control.handle(conn, msg, self.now / 1000);
                self.apply_control_effects(fx);
            }
            Node::Ui => self.ui_receive(msg),
            Node::Display(tile) => {
                let d = &self.displays[&tile];
                if !d.alive || d.session != conn {
                    return;
                }
                self.display_receive(tile, from, seq, msg, bytes.len());
            }
            Node::Source(i) => {
                let s = &self.sources[i];
                if !s.alive {
                    return;
                }
                if from == Node::Control && s.session != conn {
                    return;
                }
                self.source_receive(i, from, conn, msg);
            }
        }
    }

    fn sender_alive(&self, from: Node, conn: SessionId) -> bool {
        match from {
            Node::Display(t) => self.displays[&t].session == conn && self.displays[&t].alive,
            Node::Source(i) => self.sources[i].session == conn && self.sources[i].alive,
            _ => true,
        }
    }

    fn apply_control_effects(&mut self, fx: Vec<ControlEffect>) {
        for e in fx {
            match e {
                ControlEffect::Send(sid, msg) => {
                    let Some(node) = self.sessions.get(&sid).copied() else { continue };
                    if self.conn_of(Node::Control, node) != sid {
                        continue;
                    }
                    self.send(Node::Control, node, msg, None);
                }
                ControlEffect::Close(sid) => {
                    debug!("control closed session {sid}");
                    self.sessions.remove(&sid);
                }
            }
        }
    }

    fn ui_receive(&mut self, msg: Message) {
        match msg {
            Message::Ack(a) if a.command_id != 0 => {
                self.ui.results.insert(a.command_id, (CommandResult::Ack(a), self.now));
            }
            Message::Nack(n) if n.command_id != 0 => {
                self.ui.results.insert(n.command_id, (CommandResult::Nack(n), self.now));
            }
            Message::SceneSnapshot(s) => {
                let newer = self.ui.snapshot.as_ref().map_or(true, |cur| s.scene.revision() >= cur.scene.revision());
                if newer {
                    self.ui.snapshot = Some(*s);
                }
            }
            Message::SourceOffer(o) => self.ui.offers.push(o),
            Message::Eos(e) => self.ui.eos.push(e.content_id),
            _ => {}
        }
    }

    fn display_receive(&mut self, tile: TileId, from: Node, seq: u64, msg: Message, wire_len: usize) {
        let local = self.local_us(Node::Display(tile));
        let d = self.displays.get_mut(&tile).expect("display exists");
        match msg {
            Message::Ack(_) if d.registered.is_none() => d.registered = Some(Ok(())),
            Message::Nack(n) if d.registered.is_none() => {
                d.registered = Some(Err(n.code));
                d.alive = false;
            }
            Message::SceneSnapshot(snap) => match d.node.apply_scene(&snap) {
                Ok(effects) => {
                    d.revision_at.entry(snap.scene.revision()).or_insert(self.now);
                    self.display_effects(tile, effects);
                }
                Err(e) => debug!("{tile}: {e}"),
            },
            Message::Frame(frame) => {
                let content = frame.content_id;
                let sub = d.node.subscriptions().get(&content).copied();
                let stat = d.bytes.entry(content).or_default();
                stat.frames += 1;
                stat.wire_bytes += wire_len as u64;
                match sub {
                    Some(r) => stat.subscribed_bytes += r.area() as u64 * 3,
                    None => stat.unsubscribed_bytes += wire_len as u64,
                }
                match d.node.ingest_frame(frame, seq, local.max(0) as u64) {
                    Ok(FrameOutcome::Buffered { present_at_us }) => {
                        let at = (present_at_us as i64 - d.clock_offset_us).max(0) as u64 * 1000;
                        self.schedule(at, Event::DisplayTimer(tile));
                    }
                    Ok(_) => {}
                    Err(e) => {
                        d.protocol_errors += 1;
                        warn!("{tile}: {e}");
                    }
                }
            }
            Message::Heartbeat(hb) if from == Node::Control => d.node.on_heartbeat_reply(&hb, local),
            Message::SnapshotReq(req) => {
                let rsp = d.node.snapshot(req.mode);
                self.send(Node::Display(tile), Node::Control, Message::SnapshotRsp(rsp), None);
            }
            Message::Nack(n) => debug!("{tile}: NACK {} from {from:?}: {}", n.code, n.message),
            _ => {}
        }
    }

    fn display_effects(&mut self, tile: TileId, effects: Vec<DisplayEffect>) {
        for e in effects {
            let (endpoint, msg) = match e {
                DisplayEffect::Subscribe { endpoint, rect } => (
                    endpoint.clone(),
                    Message::Subscribe(Subscribe {
                        content_id: endpoint.content_id,
                        rect,
                    }),
                ),
                DisplayEffect::Unsubscribe { endpoint } => (
                    endpoint.clone(),
                    Message::Unsubscribe(Unsubscribe {
                        content_id: endpoint.content_id,
                    }),
                ),
            };
            let target = endpoint
                .data_addr
                .as_deref()
                .and_then(|a| a.strip_prefix("sim:src"))
                .and_then(|i| i.parse::<usize>().ok())
                .filter(|i| *i < self.sources.len());
            match target {
                Some(i) => self.send(Node::Display(tile), Node::Source(i), msg, None),
                None => warn!("{tile}: no route to {:?}", endpoint.data_addr),
            }
        }
    }

    fn display_timer(&mut self, tile: TileId) {
        let local = self.local_us(Node::Display(tile)).max(0) as u64;
        let d = self.displays.get_mut(&tile).expect("display exists");
        if !d.alive || !d.node.tick(local) {
            return;
        }
        for (c, s) in d.node.presented_seqs() {
            let last = d.last_presented.entry(c).or_insert(0);
            if s < *last {
                d.monotonic_violations += 1;
            }
            *last = s;
        }
        self.presented_this_batch = true;
    }

    fn sample_skew(&mut self) {
        let Some(scene) = self.control_scene_streams() else { return };
        for c in scene {
            let seqs: Vec<u64> = self
                .displays
                .values()
                .filter(|d| d.alive && d.node.subscriptions().contains_key(&c))
                .filter_map(|d| d.node.presented_seq(c))
                .collect();
            if let (Some(lo), Some(hi)) = (seqs.iter().min(), seqs.iter().max()) {
                let e = self.skew.entry(c).or_insert(0);
                *e = (*e).max(hi - lo);
            }
        }
        self.skew_samples += 1;
    }

    fn control_scene_streams(&self) -> Option<Vec<ContentId>> {
        let ids: Vec<ContentId> = self
            .control
            .scene()
            .contents()
            .filter(|c| c.kind == ContentKind::Stream || c.kind == ContentKind::SenderFeed)
            .map(|c| c.id)
            .collect();
        (!ids.is_empty()).then_some(ids)
    }

    fn source_receive(&mut self, i: usize, from: Node, conn: SessionId, msg: Message) {
        let now = self.now;
        let local = self.local_us(Node::Source(i));
        let s = &mut self.sources[i];
        let effects = match (from, msg) {
            (Node::Display(_), Message::Subscribe(sub)) => s.client.on_subscribe(conn, sub, local as u64),
            (Node::Display(_), Message::Unsubscribe(_)) => {
                s.client.on_unsubscribe(conn);
                Vec::new()
            }
            (Node::Control, msg) => {
                let was = s.client.state();
                match s.client.on_control(msg, local) {
                    Ok(fx) => {
                        if was == SourceState::Registering && s.client.state() == SourceState::Offering {
                            self.source_started(i, now);
                        }
                        fx
                    }
                    Err(e) => {
                        self.source_failed(i, e);
                        Vec::new()
                    }
                }
            }
            _ => Vec::new(),
        };
        self.source_effects(i, effects);
    }

    fn source_started(&mut self, i: usize, now: u64) {
        let s = &mut self.sources[i];
        match s.fps {
            Some(fps) => {
                let mut pacer = Pacer::new(PacingConfig::new(fps).expect("validated at publish"), now);
                let first = pacer.next_tick(now);
                s.pacer = Some(pacer);
                self.schedule(first.at_ns, Event::SourceTick(i));
            }
            None => {
                // load the still so later subscribers can be served at once
                if let Err(e) = s.client.produce((now / 1000) as u64) {
                    self.source_failed(i, e);
                }
            }
        }
        self.schedule(now, Event::Heartbeat(Node::Source(i)));
    }

    fn source_failed(&mut self, i: usize, e: SourceError) {
        let s = &mut self.sources[i];
        warn!("source {}: {e}", s.name);
        s.exit_code = Some(e.exit_code());
        s.refusal = Some(match &e {
            SourceError::SlotsExhausted => "SlotsExhausted".to_string(),
            SourceError::Refused { code, .. } => code.clone(),
            other => other.to_string(),
        });
        s.alive = false;
    }

    fn source_tick(&mut self, i: usize) {
        let now = self.now;
        let s = &mut self.sources[i];
        if !s.alive || s.client.state() != SourceState::Offering {
            return;
        }
        let before = s.client.counters().frames_produced;
        let effects = match s.client.produce(now / 1000) {
            Ok(fx) => fx,
            Err(e) => {
                self.source_failed(i, e);
                return;
            }
        };
        if s.client.counters().frames_produced > before {
            s.emissions.push(now);
        }
        if s.client.state() == SourceState::Ended {
            s.exit_code = Some(0);
        } else if let Some(p) = s.pacer.as_mut() {
            let next = p.next_tick(now);
            self.schedule(next.at_ns, Event::SourceTick(i));
        }
        self.source_effects(i, effects);
    }

    fn source_effects(&mut self, i: usize, effects: Vec<SourceEffect>) {
        for e in effects {
            match e {
                SourceEffect::Control(msg) => self.send(Node::Source(i), Node::Control, msg, None),
                SourceEffect::Data { to, seq, msg } => {
                    if let Some(Node::Display(tile)) = self.sessions.get(&to).copied() {
                        self.send(Node::Source(i), Node::Display(tile), msg, seq);
                    } else if let Some(tile) = self.displays.iter().find(|(_, d)| d.session == to).map(|(t, _)| *t) {
                        self.send(Node::Source(i), Node::Display(tile), msg, seq);
                    }
                }
            }
        }
    }

    /// Starts a source; returns its index.
    pub fn publish(&mut self, spec: PublishSpec) -> Result<usize, SimError> {
        let i = self.sources.len();
        let fps = match spec.role {
            Role::Streamer => {
                PacingConfig::new(spec.fps).map_err(|e| SimError::Scenario(e.to_string()))?;
                Some(spec.fps)
            }
            _ => None,
        };
        let mut config = SourceConfig::new(spec.name.clone(), spec.role);
        config.data_addr = Some(format!("sim:src{i}"));
        config.latency_budget_us = spec.latency_budget_us;
        config.thumbnail = spec.thumbnail;
        let mut client = SourceClient::new(config, spec.provider).map_err(|e| SimError::Scenario(e.to_string()))?;
        let register = client.register();
        self.sources.push(SourceSim {
            name: spec.name,
            client,
            session: 0,
            alive: true,
            fps,
            pacer: None,
            emissions: Vec::new(),
            exit_code: None,
            refusal: None,
        });
        let session = self.open_session(Node::Source(i));
        self.sources[i].session = session;
        self.send(Node::Source(i), Node::Control, register, None);
        Ok(i)
    }

    /// Ends a source cleanly.
    pub fn unpublish(&mut self, i: usize) {
        let fx = self.sources[i].client.unpublish();
        self.sources[i].exit_code = Some(0);
        self.source_effects(i, fx);
    }

    /// Sends a command from the operator session; returns its id.
    pub fn command(&mut self, op: CommandOp) -> u64 {
        self.ui.next_command += 1;
        let id = self.ui.next_command;
        self.ui.sent_at.insert(id, self.now);
        self.send(Node::Ui, Node::Control, Message::Command(Command { command_id: id, op }), None);
        id
    }

    pub fn command_result(&self, id: u64) -> Option<&CommandResult> {
        self.ui.results.get(&id).map(|(r, _)| r)
    }

    pub fn command_result_at(&self, id: u64) -> Option<u64> {
        self.ui.results.get(&id).map(|(_, t)| *t)
    }

    pub fn commands_sent(&self) -> u64 {
        self.ui.next_command
    }

    pub fn responses(&self) -> (u64, u64) {
        let acks = self.ui.results.values().filter(|(r, _)| r.is_ack()).count() as u64;
        (acks, self.ui.results.len() as u64 - acks)
    }

    pub fn ui_snapshot(&self) -> Option<&SceneSnapshot> {
        self.ui.snapshot.as_ref()
    }

    pub fn ui_offers(&self) -> &[SourceOffer] {
        &self.ui.offers
    }

    /// Crashes a display: it stops sending and receiving without saying goodbye.
    pub fn kill_display(&mut self, tile: TileId) {
        if let Some(d) = self.displays.get_mut(&tile) {
            d.alive = false;
        }
    }

    /// Starts a fresh display process for `tile`.
    pub fn restart_display(&mut self, tile: TileId) {
        let offset = self.displays.get(&tile).map_or(0, |d| d.clock_offset_us);
        self.start_display(tile, offset);
    }

    pub fn kill_source(&mut self, i: usize) {
        self.sources[i].alive = false;
    }

    pub fn display(&self, tile: TileId) -> &DisplayNode {
        &self.displays[&tile].node
    }

    pub fn display_online(&self, tile: TileId) -> bool {
        self.displays.get(&tile).is_some_and(|d| d.alive)
    }

    pub fn display_registration(&self, tile: TileId) -> Option<Result<(), String>> {
        self.displays.get(&tile).and_then(|d| d.registered.clone())
    }

    /// When `tile` first applied `revision`, if it has.
    pub fn revision_reached_at(&self, tile: TileId, revision: u64) -> Option<u64> {
        self.displays[&tile].revision_at.get(&revision).copied()
    }

    pub fn frame_bytes(&self, tile: TileId) -> &BTreeMap<ContentId, ContentBytes> {
        &self.displays[&tile].bytes
    }

    pub fn monotonic_violations(&self, tile: TileId) -> u64 {
        self.displays[&tile].monotonic_violations
    }

    pub fn source_content(&self, i: usize) -> Option<ContentId> {
        self.sources[i].client.content_id()
    }

    pub fn source_exit_code(&self, i: usize) -> Option<i32> {
        self.sources[i].exit_code
    }

    pub fn source_refusal(&self, i: usize) -> Option<&str> {
        self.sources[i].refusal.as_deref()
    }

    /// Virtual times at which the source produced frames.
    pub fn emissions(&self, i: usize) -> &[u64] {
        &self.sources[i].emissions
    }

    pub fn source_client(&self, i: usize) -> &SourceClient {
        &self.sources[i].client
    }

    pub fn source_count(&self) -> usize {
        self.sources.len()
    }

    pub fn source_name(&self, i: usize) -> &str {
        &self.sources[i].name
    }

    /// Largest presented-sequence spread seen across tiles, per content.
    pub fn skew(&self) -> &BTreeMap<ContentId, u64> {
        &self.skew
    }

    pub fn max_skew(&self) -> u64 {
        self.skew.values().copied().max().unwrap_or(0)
    }

    pub fn skew_samples(&self) -> u64 {
        self.skew_samples
    }

    /// Every live display's composited framebuffer.
    pub fn framebuffers(&mut self) -> BTreeMap<TileId, Raster> {
        self.displays
            .iter_mut()
            .filter(|(_, d)| d.alive)
            .map(|(t, d)| (*t, d.node.framebuffer().clone()))
            .collect()
    }

    pub fn snapshot_digests(&mut self) -> BTreeMap<TileId, String> {
        self.displays
            .iter_mut()
            .filter(|(_, d)| d.alive)
            .map(|(t, d)| (*t, d.node.snapshot(SnapshotMode::Digest).digest))
            .collect()
    }

    pub fn display_report(&self, tile: TileId) -> DisplayReport {
        let d = &self.displays[&tile];
        let c = d.node.counters();
        let sum = |f: fn(&ContentBytes) -> u64| d.bytes.values().map(f).sum::<u64>();
        DisplayReport {
            alive: d.alive,
            revision: d.node.revision(),
            frames_received: c.frames_received,
            frames_presented: c.frames_presented,
            stale_frames: c.stale_frames,
            superseded_frames: c.superseded_frames,
            unexpected_frames: c.unexpected_frames,
            frame_wire_bytes: sum(|b| b.wire_bytes),
            subscribed_bytes: sum(|b| b.subscribed_bytes),
            unsubscribed_bytes: sum(|b| b.unsubscribed_bytes),
            monotonic_violations: d.monotonic_violations,
            protocol_errors: d.protocol_errors,
            clock_offset_estimate_us: d.node.clock_offset_us(),
        }
    }

    pub fn source_report(&self, i: usize) -> SourceReport {
        let s = &self.sources[i];
        let e = &s.emissions;
        let mean_interval_ms = (e.len() > 1).then(|| (e[e.len() - 1] - e[0]) as f64 / (e.len() - 1) as f64 / 1e6);
        SourceReport {
            content_id: s.client.content_id().map(|c| c.0),
            frames_produced: s.client.counters().frames_produced,
            frames_sent: s.client.counters().frames_sent,
            pixel_bytes_sent: s.client.counters().pixel_bytes_sent,
            skipped_ticks: s.pacer.as_ref().map_or(0, Pacer::skipped),
            mean_interval_ms,
            exit_code: s.exit_code,
            refusal: s.refusal.clone(),
        }
    }
}

fn reg(role: Role, tile: Option<TileId>, name: Option<String>, data_addr: Option<String>) -> Message {
    Message::Register(Register {
        role,
        tile,
        name,
        capabilities: tilewall::protocol::Capabilities {
            data_addr,
            encodings: Vec::new(),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DisplayReport {
    pub alive: bool,
    pub revision: u64,
    pub frames_received: u64,
    pub frames_presented: u64,
    pub stale_frames: u64,
    pub superseded_frames: u64,
    pub unexpected_frames: u64,
    pub frame_wire_bytes: u64,
    pub subscribed_bytes: u64,
    pub unsubscribed_bytes: u64,
    pub monotonic_violations: u64,
    pub protocol_errors: u64,
    pub clock_offset_estimate_us: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SourceReport {
    pub content_id: Option<u64>,
    pub frames_produced: u64,
    pub frames_sent: u64,
    pub pixel_bytes_sent: u64,
    pub skipped_ticks: u64,
    pub mean_interval_ms: Option<f64>,
    pub exit_code: Option<i32>,
    pub refusal: Option<String>,
}
