//! Sender and streamer clients.
//!
//! A source registers with the control service, offers one content object
//! and then serves display nodes directly: each subscriber names the
//! source-space rectangle it needs and receives exactly that crop of every
//! frame.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use log::{debug, info};
use thiserror::Error;

use crate::geometry::Rect;
use crate::protocol::{
    estimate_offset, Ack, Capabilities, Encoding, Eos, Frame, Heartbeat, Message, Nack, Register, Role, SourceOffer,
    Subscribe,
};
use crate::raster::{Pattern, Raster, RasterError};
use crate::scene::{ContentId, ContentKind};

pub const THUMBNAIL_PX: u32 = 128;
pub const DEFAULT_LATENCY_BUDGET_US: u64 = 50_000;
pub const MAX_FPS: u32 = 60;

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("control refused the source: no projection slot free")]
    SlotsExhausted,
    #[error("control refused the source: {code}: {message}")]
    Refused { code: String, message: String },
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("frame source: {0}")]
    Provider(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

impl SourceError {
    /// Process exit status for command-line clients.
    pub fn exit_code(&self) -> i32 {
        match self {
            SourceError::SlotsExhausted => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderKind {
    StillImage,
    SyntheticPattern,
    FileSequence,
    CaptureStub,
}

type Loader = Box<dyn Fn(&Path) -> Result<Raster, SourceError> + Send>;

enum Frames {
    Still(Raster),
    Pattern(Pattern),
    Files { paths: Vec<PathBuf>, load: Loader },
    Replay(Vec<Raster>),
}

/// Produces natural-sized frames with consecutive indices.
pub struct FrameProvider {
    frames: Frames,
    width: u32,
    height: u32,
    next_index: u64,
    limit: Option<u64>,
}

impl fmt::Debug for FrameProvider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FrameProvider")
            .field("kind", &self.kind())
            .field("width", &self.width)
            .field("height", &self.height)
            .field("next_index", &self.next_index)
            .finish()
    }
}

fn load_ppm(path: &Path) -> Result<Raster, SourceError> {
    let bytes = std::fs::read(path).map_err(|e| SourceError::Provider(format!("{}: {e}", path.display())))?;
    Ok(Raster::from_ppm(&bytes)?)
}

impl FrameProvider {
    pub fn still(image: Raster) -> Self {
        let (width, height) = (image.width(), image.height());
        FrameProvider {
            frames: Frames::Still(image),
            width,
            height,
            next_index: 0,
            limit: None,
        }
    }

    pub fn pattern(pattern: Pattern, width: u32, height: u32) -> Result<Self, SourceError> {
        if width == 0 || height == 0 {
            return Err(SourceError::Validation("pattern size must be positive".into()));
        }
        Ok(FrameProvider {
            frames: Frames::Pattern(pattern),
            width,
            height,
            next_index: 0,
            limit: None,
        })
    }

    /// PPM files, played once in the given order.
    pub fn file_sequence(paths: Vec<PathBuf>) -> Result<Self, SourceError> {
        Self::file_sequence_with(paths, Box::new(load_ppm))
    }

    /// Files decoded by `load`. The first file fixes the natural size.
    pub fn file_sequence_with(paths: Vec<PathBuf>, load: Loader) -> Result<Self, SourceError> {
        let first = paths
            .first()
            .ok_or_else(|| SourceError::Validation("empty file sequence".into()))?;
        let probe = load(first)?;
        Ok(FrameProvider {
            width: probe.width(),
            height: probe.height(),
            limit: Some(paths.len() as u64),
            frames: Frames::Files { paths, load },
            next_index: 0,
        })
    }

    /// Sorted `*.ppm` files in `dir`.
    pub fn ppm_dir(dir: &Path) -> Result<Self, SourceError> {
        let read = std::fs::read_dir(dir).map_err(|e| SourceError::Provider(format!("{}: {e}", dir.display())))?;
        let mut paths: Vec<PathBuf> = read
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
            .collect();
        paths.sort();
        Self::file_sequence(paths)
    }

    /// Replays recorded frames in place of screen capture.
    pub fn capture_stub(frames: Vec<Raster>) -> Result<Self, SourceError> {
        let first = frames
            .first()
            .ok_or_else(|| SourceError::Validation("capture stub needs at least one frame".into()))?;
        let (width, height) = (first.width(), first.height());
        if frames.iter().any(|f| f.width() != width || f.height() != height) {
            return Err(SourceError::Validation("recorded frames differ in size".into()));
        }
        Ok(FrameProvider {
            limit: Some(frames.len() as u64),
            frames: Frames::Replay(frames),
            width,
            height,
            next_index: 0,
        })
    }

    /// Stops after `n` frames in total.
    pub fn with_limit(mut self, n: u64) -> Self {
        self.limit = Some(self.limit.map_or(n, |l| l.min(n)));
        self
    }

    pub fn kind(&self) -> ProviderKind {
        match self.frames {
            Frames::Still(_) => ProviderKind::StillImage,
            Frames::Pattern(_) => ProviderKind::SyntheticPattern,
            Frames::Files { .. } => ProviderKind::FileSequence,
            Frames::Replay(_) => ProviderKind::CaptureStub,
        }
    }

    pub fn natural_size(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    /// The next frame and its index, or `None` once exhausted.
    pub fn next_frame(&mut self) -> Result<Option<(u64, Raster)>, SourceError> {
        let i = self.next_index;
        if self.limit.is_some_and(|l| i >= l) {
            return Ok(None);
        }
        let raster = match &self.frames {
            Frames::Still(r) => r.clone(),
            Frames::Pattern(p) => p.render(self.width, self.height, i),
            Frames::Files { paths, load } => load(&paths[i as usize])?,
            Frames::Replay(frames) => frames[i as usize].clone(),
        };
        if raster.width() != self.width || raster.height() != self.height {
            return Err(SourceError::Provider(format!(
                "frame {i} is {}x{}, expected {}x{}",
                raster.width(),
                raster.height(),
                self.width,
                self.height
            )));
        }
        self.next_index += 1;
        Ok(Some((i, raster)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropPolicy {
    DropOldest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacingConfig {
    pub target_fps: u32,
    pub drop_policy: DropPolicy,
    pub keyframe_interval: u32,
}

impl PacingConfig {
    pub fn new(target_fps: u32) -> Result<Self, SourceError> {
        if target_fps == 0 || target_fps > MAX_FPS {
            return Err(SourceError::Validation(format!(
                "target_fps must be in 1..={MAX_FPS}, got {target_fps}"
            )));
        }
        Ok(PacingConfig {
            target_fps,
            drop_policy: DropPolicy::DropOldest,
            keyframe_interval: target_fps,
        })
    }

    /// Nominal spacing between frames.
    pub fn interval_ns(&self) -> f64 {
        1e9 / self.target_fps as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tick {
    pub index: u64,
    pub at_ns: u64,
}

/// Absolute frame schedule: tick `k` falls at `epoch + floor(k·10⁹/fps)` ns,
/// so rounding never accumulates.
#[derive(Debug, Clone)]
pub struct Pacer {
    config: PacingConfig,
    epoch_ns: u64,
    next_index: u64,
    skipped: u64,
}

impl Pacer {
    pub fn new(config: PacingConfig, epoch_ns: u64) -> Self {
        Pacer {
            config,
            epoch_ns,
            next_index: 0,
            skipped: 0,
        }
    }

    pub fn config(&self) -> PacingConfig {
        self.config
    }

    pub fn tick_time(&self, index: u64) -> u64 {
        self.epoch_ns + (index as u128 * 1_000_000_000 / self.config.target_fps as u128) as u64
    }

    /// Ticks skipped so far because production fell behind.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// The next tick not already in the past at `now_ns`. Missed ticks are
    /// dropped rather than emitted late.
    pub fn next_tick(&mut self, now_ns: u64) -> Tick {
        let mut k = self.next_index;
        if self.tick_time(k) < now_ns {
            let elapsed = (now_ns - self.epoch_ns) as u128;
            let fps = self.config.target_fps as u128;
            // first k with k·10⁹/fps ≥ elapsed, allowing for the floor
            let mut j = (elapsed * fps / 1_000_000_000) as u64;
            while self.tick_time(j) < now_ns {
                j += 1;
            }
            self.skipped += j - k;
            k = j;
        }
        self.next_index = k + 1;
        Tick {
            index: k,
            at_ns: self.tick_time(k),
        }
    }
}

/// Identifies one display-node connection at the source.
pub type SubscriberId = u64;

#[derive(Debug, Clone, PartialEq)]
pub enum SourceEffect {
    /// To the control service.
    Control(Message),
    /// To a subscriber; frames carry their sequence number.
    Data { to: SubscriberId, seq: Option<u64>, msg: Message },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceState {
    Unregistered,
    Registering,
    Offering,
    Ended,
}

#[derive(Debug, Clone)]
pub struct SourceConfig {
    pub name: String,
    pub role: Role,
    pub data_addr: Option<String>,
    pub latency_budget_us: u64,
    pub thumbnail: bool,
    pub encoding: Encoding,
}

impl SourceConfig {
    pub fn new(name: impl Into<String>, role: Role) -> Self {
        SourceConfig {
            name: name.into(),
            role,
            data_addr: None,
            latency_budget_us: DEFAULT_LATENCY_BUDGET_US,
            thumbnail: true,
            encoding: Encoding::Raw,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SourceCounters {
    pub frames_produced: u64,
    pub frames_sent: u64,
    pub pixel_bytes_sent: u64,
    pub range_nacks: u64,
}

pub struct SourceClient {
    config: SourceConfig,
    provider: FrameProvider,
    state: SourceState,
    content_id: Option<ContentId>,
    subscribers: BTreeMap<SubscriberId, Rect>,
    last_frame: Option<Raster>,
    last_seq: u64,
    clock_offset_us: i64,
    counters: SourceCounters,
}

impl SourceClient {
    pub fn new(config: SourceConfig, provider: FrameProvider) -> Result<Self, SourceError> {
        if !config.role.is_source() {
            return Err(SourceError::Validation(format!("{:?} is not a source role", config.role)));
        }
        Ok(SourceClient {
            config,
            provider,
            state: SourceState::Unregistered,
            content_id: None,
            subscribers: BTreeMap::new(),
            last_frame: None,
            last_seq: 0,
            clock_offset_us: 0,
            counters: SourceCounters::default(),
        })
    }

    pub fn state(&self) -> SourceState {
        self.state
    }

    pub fn content_id(&self) -> Option<ContentId> {
        self.content_id
    }

    pub fn subscribers(&self) -> &BTreeMap<SubscriberId, Rect> {
        &self.subscribers
    }

    pub fn counters(&self) -> &SourceCounters {
        &self.counters
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn natural_rect(&self) -> Rect {
        let (w, h) = self.provider.natural_size();
        Rect::new(0, 0, w as i64, h as i64)
    }

    pub fn content_kind(&self) -> ContentKind {
        match self.config.role {
            Role::Streamer => ContentKind::Stream,
            _ => ContentKind::SenderFeed,
        }
    }

    pub fn set_clock_offset(&mut self, offset_us: i64) {
        self.clock_offset_us = offset_us;
    }

    /// The REGISTER that opens the control session.
    pub fn register(&mut self) -> Message {
        self.state = SourceState::Registering;
        Message::Register(Register {
            role: self.config.role,
            tile: None,
            name: Some(self.config.name.clone()),
            capabilities: Capabilities {
                data_addr: self.config.data_addr.clone(),
                encodings: vec![Encoding::Raw, Encoding::Rle],
            },
        })
    }

    /// Handles a control-plane message. A refused registration is an error
    /// the caller should exit on.
    pub fn on_control(&mut self, msg: Message, now_us: i64) -> Result<Vec<SourceEffect>, SourceError> {
        match (self.state, msg) {
            (SourceState::Registering, Message::Ack(Ack { content_id: Some(id), .. })) => {
                self.content_id = Some(id);
                self.state = SourceState::Offering;
                info!("{}: registered as content {id}", self.config.name);
                Ok(vec![SourceEffect::Control(Message::SourceOffer(self.offer(id)?))])
            }
            (SourceState::Registering, Message::Nack(Nack { code, message, .. })) => {
                self.state = SourceState::Ended;
                if code == "SlotsExhausted" {
                    Err(SourceError::SlotsExhausted)
                } else {
                    Err(SourceError::Refused { code, message })
                }
            }
            (_, Message::Heartbeat(hb)) => {
                if let (Some(t2), Some(t3)) = (hb.t2, hb.t3) {
                    if let Ok(e) = estimate_offset(hb.t1, t2, t3, now_us) {
                        self.clock_offset_us = e.offset_us;
                    }
                }
                Ok(Vec::new())
            }
            (SourceState::Offering, Message::Nack(n)) => {
                debug!("{}: control refused {}: {}", self.config.name, n.code, n.message);
                Ok(Vec::new())
            }
            (_, Message::Ack(_)) | (_, Message::SceneSnapshot(_)) => Ok(Vec::new()),
            (state, other) => Err(SourceError::Protocol(format!(
                "unexpected {:?} in state {state:?}",
                other.msg_type()
            ))),
        }
    }

    fn offer(&mut self, id: ContentId) -> Result<SourceOffer, SourceError> {
        let (w, h) = self.provider.natural_size();
        let thumbnail = if self.config.thumbnail {
            let frame = match &self.last_frame {
                Some(f) => f.clone(),
                None => {
                    let (_, f) = self
                        .provider
                        .next_frame()?
                        .ok_or_else(|| SourceError::Provider("no frames to offer".into()))?;
                    self.counters.frames_produced += 1;
                    self.last_frame = Some(f.clone());
                    f
                }
            };
            Some(frame.thumbnail(THUMBNAIL_PX))
        } else {
            None
        };
        Ok(SourceOffer {
            content_id: id,
            name: self.config.name.clone(),
            kind: self.content_kind(),
            natural_w: w,
            natural_h: h,
            thumbnail,
        })
    }

    /// A display node asks for (part of) this source. Stills are resent at
    /// once so the new subscriber does not wait for the next frame.
    pub fn on_subscribe(&mut self, from: SubscriberId, sub: Subscribe, now_local_us: u64) -> Vec<SourceEffect> {
        if Some(sub.content_id) != self.content_id {
            return vec![SourceEffect::Data {
                to: from,
                seq: None,
                msg: Message::Nack(Nack {
                    command_id: 0,
                    code: "NotFound".into(),
                    message: format!("content {} is not served here", sub.content_id),
                }),
            }];
        }
        if sub.rect.is_empty() || !self.natural_rect().contains_rect(&sub.rect) {
            self.counters.range_nacks += 1;
            return vec![SourceEffect::Data {
                to: from,
                seq: None,
                msg: Message::Nack(Nack {
                    command_id: 0,
                    code: "Range".into(),
                    message: format!("subscription {} outside {}", sub.rect, self.natural_rect()),
                }),
            }];
        }
        self.subscribers.insert(from, sub.rect);
        if self.provider.kind() == ProviderKind::StillImage {
            if let Some(frame) = self.last_frame.clone() {
                return self.dispatch_regions(&frame, now_local_us);
            }
        }
        Vec::new()
    }

    pub fn on_unsubscribe(&mut self, from: SubscriberId) {
        self.subscribers.remove(&from);
    }

    /// Produces the next frame and dispatches it. Returns EOS effects when the
    /// provider is exhausted.
    pub fn produce(&mut self, now_local_us: u64) -> Result<Vec<SourceEffect>, SourceError> {
        if self.state != SourceState::Offering {
            return Ok(Vec::new());
        }
        match self.provider.next_frame()? {
            Some((_, frame)) => {
                self.counters.frames_produced += 1;
                let fx = self.dispatch_regions(&frame, now_local_us);
                self.last_frame = Some(frame);
                Ok(fx)
            }
            None => Ok(self.unpublish()),
        }
    }

    /// One FRAME per subscriber holding exactly its rectangle; all share the
    /// same sequence number.
    pub fn dispatch_regions(&mut self, frame: &Raster, now_local_us: u64) -> Vec<SourceEffect> {
        let Some(content_id) = self.content_id else { return Vec::new() };
        if self.subscribers.is_empty() {
            return Vec::new();
        }
        self.last_seq += 1;
        let seq = self.last_seq;
        let deadline_us = (now_local_us as i64 + self.clock_offset_us).max(0) as u64 + self.config.latency_budget_us;
        let mut out = Vec::with_capacity(self.subscribers.len());
        for (to, rect) in &self.subscribers {
            let pixels = frame.crop(*rect).expect("subscriptions are validated").into_data();
            self.counters.frames_sent += 1;
            self.counters.pixel_bytes_sent += pixels.len() as u64;
            out.push(SourceEffect::Data {
                to: *to,
                seq: Some(seq),
                msg: Message::Frame(Frame {
                    content_id,
                    region: *rect,
                    encoding: self.config.encoding,
                    deadline_us,
                    pixels,
                }),
            });
        }
        out
    }

    /// Ends the stream: EOS to every subscriber and to control.
    pub fn unpublish(&mut self) -> Vec<SourceEffect> {
        let Some(content_id) = self.content_id else {
            self.state = SourceState::Ended;
            return Vec::new();
        };
        self.state = SourceState::Ended;
        let eos = Message::Eos(Eos { content_id });
        let mut out: Vec<SourceEffect> = std::mem::take(&mut self.subscribers)
            .into_keys()
            .map(|to| SourceEffect::Data {
                to,
                seq: None,
                msg: eos.clone(),
            })
            .collect();
        out.push(SourceEffect::Control(eos));
        out
    }

    pub fn heartbeat(&self, now_us: i64) -> Message {
        Message::Heartbeat(Heartbeat {
            t1: now_us,
            t2: None,
            t3: None,
        })
    }
}
