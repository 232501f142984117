//! The per-tile display node.
//!
//! A node holds the latest scene, works out which source rectangles its tile
//! needs, buffers incoming frames until their deadlines and composites its
//! framebuffer. It performs no I/O itself: the caller feeds it messages and
//! timer ticks and carries out the returned [`DisplayEffect`]s.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::str::FromStr;

use base64::Engine;
use log::{debug, warn};
use thiserror::Error;

use crate::geometry::{Rect, TileGrid, TileId};
use crate::protocol::{estimate_offset, Frame, Heartbeat, SceneSnapshot, SnapshotMode, SnapshotRsp, SourceEndpoint};
use crate::pyramid::{Pyramid, RegionRequest};
use crate::raster::{Pattern, Raster};
use crate::scene::{ContentId, ContentKind, ContentObject, PlacementId, Scene, VisibleRegion};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DisplayError {
    #[error("stale scene revision {got} (holding {have})")]
    StaleRevision { got: u64, have: u64 },
    #[error("snapshot is for a different wall")]
    WallMismatch,
    #[error("protocol: {0}")]
    Protocol(String),
}

/// Network actions requested by the node.
#[derive(Debug, Clone, PartialEq)]
pub enum DisplayEffect {
    Subscribe { endpoint: SourceEndpoint, rect: Rect },
    Unsubscribe { endpoint: SourceEndpoint },
}

/// What happened to an incoming frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameOutcome {
    /// Buffered; present at the given local time.
    Buffered { present_at_us: u64 },
    Unsubscribed,
    Stale,
    Superseded,
}

/// Source-space rectangles this tile currently needs, per content.
pub type SubscriptionSet = BTreeMap<ContentId, Rect>;

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DisplayCounters {
    pub frames_received: u64,
    pub frames_presented: u64,
    pub unexpected_frames: u64,
    pub stale_frames: u64,
    pub superseded_frames: u64,
    pub stale_snapshots: u64,
    pub recomposites: u64,
}

#[derive(Debug, Clone)]
struct PendingFrame {
    present_at_us: u64,
    region: Rect,
    pixels: Raster,
}

#[derive(Debug, Clone)]
struct PresentedFrame {
    region: Rect,
    pixels: Raster,
}

/// Per-content stream state. A new `epoch` (source re-registration) starts a
/// fresh sequence space.
#[derive(Debug, Clone, Default)]
struct StreamState {
    epoch: u64,
    presented_seq: u64,
    presented: Option<PresentedFrame>,
    pending: BTreeMap<u64, PendingFrame>,
}

struct DrawItem {
    placement: PlacementId,
    content: ContentObject,
    scale: f64,
    region: VisibleRegion,
}

const MAX_PENDING: usize = 8;
const BACKGROUND: [u8; 3] = [0, 0, 0];

pub struct DisplayNode {
    grid: TileGrid,
    tile: TileId,
    pyramid_root: Option<PathBuf>,
    scene: Option<Scene>,
    endpoints: BTreeMap<ContentId, SourceEndpoint>,
    subscriptions: SubscriptionSet,
    subscribed_endpoints: BTreeMap<ContentId, SourceEndpoint>,
    streams: BTreeMap<ContentId, StreamState>,
    draw: Vec<DrawItem>,
    framebuffer: Raster,
    dirty: bool,
    clock_offset_us: i64,
    pyramids: HashMap<String, Option<Pyramid>>,
    level_cache: HashMap<(String, usize, Rect), Option<Raster>>,
    counters: DisplayCounters,
}

impl DisplayNode {
    pub fn new(grid: TileGrid, tile: TileId, pyramid_root: Option<PathBuf>) -> Self {
        let px = grid.tile_px();
        DisplayNode {
            grid,
            tile,
            pyramid_root,
            scene: None,
            endpoints: BTreeMap::new(),
            subscriptions: SubscriptionSet::new(),
            subscribed_endpoints: BTreeMap::new(),
            streams: BTreeMap::new(),
            draw: Vec::new(),
            framebuffer: Raster::new(px.w, px.h, BACKGROUND),
            dirty: true,
            clock_offset_us: 0,
            pyramids: HashMap::new(),
            level_cache: HashMap::new(),
            counters: DisplayCounters::default(),
        }
    }

    pub fn tile(&self) -> TileId {
        self.tile
    }

    pub fn revision(&self) -> u64 {
        self.scene.as_ref().map_or(0, Scene::revision)
    }

    pub fn scene(&self) -> Option<&Scene> {
        self.scene.as_ref()
    }

    pub fn subscriptions(&self) -> &SubscriptionSet {
        &self.subscriptions
    }

    pub fn counters(&self) -> &DisplayCounters {
        &self.counters
    }

    /// Last presented frame sequence per content.
    pub fn presented_seqs(&self) -> BTreeMap<ContentId, u64> {
        self.streams
            .iter()
            .filter(|(_, s)| s.presented_seq > 0)
            .map(|(c, s)| (*c, s.presented_seq))
            .collect()
    }

    pub fn presented_seq(&self, content: ContentId) -> Option<u64> {
        self.streams.get(&content).map(|s| s.presented_seq).filter(|s| *s > 0)
    }

    /// Control clock minus local clock.
    pub fn clock_offset_us(&self) -> i64 {
        self.clock_offset_us
    }

    pub fn set_clock_offset(&mut self, offset_us: i64) {
        self.clock_offset_us = offset_us;
    }

    /// Completes a heartbeat exchange initiated by this node.
    pub fn on_heartbeat_reply(&mut self, hb: &Heartbeat, t4_local_us: i64) {
        let (Some(t2), Some(t3)) = (hb.t2, hb.t3) else {
            return;
        };
        match estimate_offset(hb.t1, t2, t3, t4_local_us) {
            Ok(e) => self.clock_offset_us = e.offset_us,
            Err(e) => debug!("tile {}: dropped clock sample: {e}", self.tile),
        }
    }

    fn to_local(&self, control_us: u64) -> u64 {
        (control_us as i64 - self.clock_offset_us).max(0) as u64
    }

    /// Replaces the scene with a newer snapshot and returns the subscription
    /// changes it implies.
    pub fn apply_scene(&mut self, snapshot: &SceneSnapshot) -> Result<Vec<DisplayEffect>, DisplayError> {
        let incoming = snapshot.scene.revision();
        if let Some(cur) = &self.scene {
            if incoming <= cur.revision() {
                self.counters.stale_snapshots += 1;
                debug!("tile {}: StaleRevision {incoming} <= {}", self.tile, cur.revision());
                return Err(DisplayError::StaleRevision {
                    got: incoming,
                    have: cur.revision(),
                });
            }
        }
        if snapshot.scene.wall() != &self.grid {
            return Err(DisplayError::WallMismatch);
        }
        let scene = snapshot.scene.clone();
        self.endpoints = snapshot
            .registry
            .sources
            .iter()
            .map(|s| (s.content_id, s.clone()))
            .collect();

        let mut draw = Vec::new();
        let mut wanted = SubscriptionSet::new();
        for p in scene.placements() {
            let Some(content) = scene.content(p.content) else { continue };
            let Ok(Some(region)) = scene.visible_regions_on(p.id, self.tile) else {
                continue;
            };
            if content.kind.is_live() && content.online && self.endpoints.get(&content.id).is_some_and(|e| e.online) {
                wanted
                    .entry(content.id)
                    .and_modify(|r| *r = r.union(&region.footprint))
                    .or_insert(region.footprint);
            }
            draw.push(DrawItem {
                placement: p.id,
                content: content.clone(),
                scale: p.scale,
                region,
            });
        }

        let mut effects = Vec::new();
        for (content, endpoint) in std::mem::take(&mut self.subscribed_endpoints) {
            let keep = wanted.contains_key(&content) && self.endpoints.get(&content) == Some(&endpoint);
            if keep {
                self.subscribed_endpoints.insert(content, endpoint);
            } else {
                self.streams
                    .entry(content)
                    .and_modify(|s| s.pending.clear());
                effects.push(DisplayEffect::Unsubscribe { endpoint });
            }
        }
        for (content, rect) in &wanted {
            let endpoint = self.endpoints[content].clone();
            let stream = self.streams.entry(*content).or_default();
            if stream.epoch != endpoint_epoch(&endpoint) {
                *stream = StreamState {
                    epoch: endpoint_epoch(&endpoint),
                    ..StreamState::default()
                };
            }
            if self.subscriptions.get(content) != Some(rect) || !self.subscribed_endpoints.contains_key(content) {
                effects.push(DisplayEffect::Subscribe {
                    endpoint: endpoint.clone(),
                    rect: *rect,
                });
            }
            self.subscribed_endpoints.insert(*content, endpoint);
        }
        self.streams.retain(|c, s| {
            if !wanted.contains_key(c) {
                s.pending.clear();
                s.presented = None;
            }
            true
        });
        self.subscriptions = wanted;
        self.draw = draw;
        self.scene = Some(scene);
        self.level_cache.clear();
        self.dirty = true;
        Ok(effects)
    }

    /// Accepts one FRAME (sequence `seq`) received at local time `now_us`.
    pub fn ingest_frame(&mut self, frame: Frame, seq: u64, now_us: u64) -> Result<FrameOutcome, DisplayError> {
        self.counters.frames_received += 1;
        let Some(sub) = self.subscriptions.get(&frame.content_id).copied() else {
            self.counters.unexpected_frames += 1;
            return Ok(FrameOutcome::Unsubscribed);
        };
        let natural = self
            .scene
            .as_ref()
            .and_then(|s| s.content(frame.content_id))
            .map(ContentObject::natural_rect)
            .expect("subscribed content is in the scene");
        if !natural.contains_rect(&frame.region) {
            return Err(DisplayError::Protocol(format!(
                "frame region {} outside {natural}",
                frame.region
            )));
        }
        if frame.region.intersect(&sub).is_none() {
            self.counters.unexpected_frames += 1;
            return Ok(FrameOutcome::Unsubscribed);
        }
        let present_at_us = self.to_local(frame.deadline_us);
        let stream = self.streams.entry(frame.content_id).or_default();
        if seq <= stream.presented_seq {
            self.counters.stale_frames += 1;
            return Ok(FrameOutcome::Stale);
        }
        let newest_pending = stream.pending.keys().next_back().copied().unwrap_or(0);
        if present_at_us <= now_us && seq < newest_pending {
            self.counters.superseded_frames += 1;
            return Ok(FrameOutcome::Superseded);
        }
        let pixels = frame.raster();
        stream.pending.insert(
            seq,
            PendingFrame {
                present_at_us,
                region: frame.region,
                pixels,
            },
        );
        while stream.pending.len() > MAX_PENDING {
            stream.pending.pop_first();
            self.counters.superseded_frames += 1;
        }
        Ok(FrameOutcome::Buffered { present_at_us })
    }

    /// Earliest pending presentation time, for timer scheduling.
    pub fn next_deadline(&self) -> Option<u64> {
        self.streams
            .values()
            .flat_map(|s| s.pending.values().map(|p| p.present_at_us))
            .min()
    }

    /// Presents every frame whose deadline has passed. For each content only
    /// the newest due frame is shown; older due frames are dropped. Returns
    /// whether anything changed.
    pub fn tick(&mut self, now_us: u64) -> bool {
        let mut changed = false;
        for stream in self.streams.values_mut() {
            let due = stream
                .pending
                .iter()
                .filter(|(_, p)| p.present_at_us <= now_us)
                .map(|(s, _)| *s)
                .next_back();
            let Some(seq) = due else { continue };
            let frame = stream.pending.remove(&seq).expect("due frame present");
            let older: Vec<u64> = stream.pending.range(..seq).map(|(s, _)| *s).collect();
            for s in older {
                stream.pending.remove(&s);
                self.counters.superseded_frames += 1;
            }
            debug_assert!(seq > stream.presented_seq);
            stream.presented_seq = seq;
            stream.presented = Some(PresentedFrame {
                region: frame.region,
                pixels: frame.pixels,
            });
            self.counters.frames_presented += 1;
            changed = true;
        }
        if changed {
            self.dirty = true;
        }
        changed
    }

    /// The composited tile, redrawn if anything changed since the last call.
    pub fn framebuffer(&mut self) -> &Raster {
        if self.dirty {
            self.composite();
        }
        &self.framebuffer
    }

    fn composite(&mut self) {
        self.counters.recomposites += 1;
        let px = self.grid.tile_px();
        let mut fb = Raster::new(px.w, px.h, BACKGROUND);
        let draw = std::mem::take(&mut self.draw);
        for item in &draw {
            self.draw_item(&mut fb, item);
        }
        self.draw = draw;
        self.framebuffer = fb;
        self.dirty = false;
    }

    fn draw_item(&mut self, fb: &mut Raster, item: &DrawItem) {
        let region = &item.region;
        let content = &item.content;
        match content.kind {
            ContentKind::TestPattern => {
                let pattern = Pattern::from_str(&content.source_ref).expect("validated pattern");
                let (w, h) = (content.natural_w, content.natural_h);
                for (x, y, u, v) in region.pixels() {
                    fb.put(x as u32, y as u32, pattern.pixel(w, h, u, v, 0));
                }
            }
            ContentKind::PyramidImage => match self.pyramid_patch(item) {
                Some((level, origin, patch)) => {
                    for (x, y, u, v) in region.pixels() {
                        let lx = (u >> level) - origin.0;
                        let ly = (v >> level) - origin.1;
                        fb.put(x as u32, y as u32, patch.get(lx, ly));
                    }
                }
                None => draw_placeholder(fb, item),
            },
            ContentKind::SenderFeed | ContentKind::Stream => {
                let frame = self
                    .streams
                    .get(&content.id)
                    .and_then(|s| s.presented.as_ref())
                    .filter(|f| content.online && f.region.contains_rect(&region.footprint));
                match frame {
                    Some(f) => {
                        let (ox, oy) = (f.region.x as u32, f.region.y as u32);
                        for (x, y, u, v) in region.pixels() {
                            fb.put(x as u32, y as u32, f.pixels.get(u - ox, v - oy));
                        }
                    }
                    None => draw_placeholder(fb, item),
                }
            }
        }
    }

    /// Reads the part of the right pyramid level that this region samples.
    fn pyramid_patch(&mut self, item: &DrawItem) -> Option<(u32, (u32, u32), Raster)> {
        let source_ref = &item.content.source_ref;
        let root = self.pyramid_root.clone()?;
        let pyramid = self
            .pyramids
            .entry(source_ref.clone())
            .or_insert_with(|| {
                let path = root.join(source_ref);
                let opened = if path.is_dir() {
                    Pyramid::open(&path)
                } else {
                    Pyramid::open_manifest(&path)
                };
                opened.map_err(|e| warn!("pyramid {source_ref}: {e}")).ok()
            })
            .as_ref()?;
        let index = pyramid.index();
        if index.source_w != item.content.natural_w || index.source_h != item.content.natural_h {
            warn!("pyramid {source_ref}: size disagrees with content object");
            return None;
        }
        let level = index.select_level(item.scale);
        let info = index.levels[level];
        let fp = item.region.footprint;
        let x0 = (fp.x as u32) >> level;
        let y0 = (fp.y as u32) >> level;
        let x1 = ((fp.right() - 1) as u32 >> level) + 1;
        let y1 = ((fp.bottom() - 1) as u32 >> level) + 1;
        let rect = Rect::new(
            x0 as i64,
            y0 as i64,
            (x1.min(info.w) - x0) as i64,
            (y1.min(info.h) - y0) as i64,
        );
        let key = (source_ref.clone(), level, rect);
        let patch = self
            .level_cache
            .entry(key)
            .or_insert_with(|| {
                pyramid
                    .read_region(RegionRequest { level, rect })
                    .map_err(|e| warn!("pyramid {source_ref}: {e}"))
                    .ok()
            })
            .clone()?;
        Some((level as u32, (x0, y0), patch))
    }

    /// Current framebuffer as PPM or digest.
    pub fn snapshot(&mut self, mode: SnapshotMode) -> SnapshotRsp {
        let tile = self.tile;
        let revision = self.revision();
        let fb = self.framebuffer();
        SnapshotRsp {
            tile,
            revision,
            width: fb.width(),
            height: fb.height(),
            digest: format!("{:016x}", fb.digest()),
            ppm_base64: match mode {
                SnapshotMode::Raster => Some(base64::engine::general_purpose::STANDARD.encode(fb.to_ppm())),
                SnapshotMode::Digest => None,
            },
        }
    }
}

fn endpoint_epoch(e: &SourceEndpoint) -> u64 {
    e.epoch
}

/// 3×5 digit glyphs, one row per byte, high bit left.
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

const GLYPH_SCALE: u32 = 6;
const LABEL_ORIGIN: u32 = 12;

fn label_pixel(id: u64, u: u32, v: u32) -> bool {
    if u < LABEL_ORIGIN || v < LABEL_ORIGIN {
        return false;
    }
    let (lx, ly) = ((u - LABEL_ORIGIN) / GLYPH_SCALE, (v - LABEL_ORIGIN) / GLYPH_SCALE);
    if ly >= 5 {
        return false;
    }
    let digits = id.to_string();
    let (glyph, col) = (lx / 4, lx % 4);
    if col == 3 {
        return false;
    }
    match digits.as_bytes().get(glyph as usize) {
        Some(d) => DIGITS[(d - b'0') as usize][ly as usize] & (0b100 >> col) != 0,
        None => false,
    }
}

/// Checkerboard with the content id drawn in the placement's top-left.
fn draw_placeholder(fb: &mut Raster, item: &DrawItem) {
    let id = item.content.id.0;
    for (x, y, u, v) in item.region.pixels() {
        let px = if label_pixel(id, u, v) {
            [255, 220, 0]
        } else if (u / 32 + v / 32) % 2 == 0 {
            [96, 96, 96]
        } else {
            [48, 48, 48]
        };
        fb.put(x as u32, y as u32, px);
    }
    debug!("placement {} drawn as placeholder", item.placement);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_wall, WallConfig};
    use crate::protocol::{Encoding, RegistrySummary};

    fn wall() -> TileGrid {
        build_wall(&WallConfig::reference_wall()).unwrap()
    }

    fn endpoint(c: ContentId) -> SourceEndpoint {
        SourceEndpoint {
            content_id: c,
            name: format!("src{}", c.0),
            data_addr: Some(format!("sim:src{}", c.0)),
            online: true,
            epoch: 1,
        }
    }

    fn snapshot(scene: &Scene) -> SceneSnapshot {
        SceneSnapshot {
            scene: scene.clone(),
            registry: RegistrySummary {
                sources: scene
                    .contents()
                    .filter(|c| c.kind.is_live())
                    .map(|c| endpoint(c.id))
                    .collect(),
                ..Default::default()
            },
        }
    }

    fn frame(c: ContentId, region: Rect, deadline: u64, fill: u8) -> Frame {
        Frame {
            content_id: c,
            region,
            encoding: Encoding::Raw,
            deadline_us: deadline,
            pixels: vec![fill; region.area() as usize * 3],
        }
    }

    fn feed_scene(x: f64, y: f64) -> (Scene, ContentId) {
        let mut s = Scene::new(wall());
        let c = s.register_content(ContentKind::SenderFeed, 400, 300, "cam", None).unwrap();
        s.place(c, x, y, 1.0, 0.0).unwrap();
        (s, c)
    }

    #[test]
    fn only_intersecting_tile_subscribes() {
        let (s, c) = feed_scene(100.0, 100.0);
        for tile in wall().tiles() {
            let mut n = DisplayNode::new(wall(), tile, None);
            let fx = n.apply_scene(&snapshot(&s)).unwrap();
            if tile == TileId::new(0, 0) {
                assert_eq!(fx.len(), 1);
                assert_eq!(n.subscriptions().get(&c), Some(&Rect::new(0, 0, 400, 300)));
            } else {
                assert!(fx.is_empty());
                assert!(n.subscriptions().is_empty());
            }
        }
    }

    #[test]
    fn stale_snapshot_is_a_noop() {
        let (mut s, c) = feed_scene(100.0, 100.0);
        let mut n = DisplayNode::new(wall(), TileId::new(0, 0), None);
        let p = s.placements()[0].id;
        s.move_to(p, 0.0, 0.0).unwrap();
        let newer = snapshot(&s);
        let mut older = newer.clone();
        older.scene.rebase_revision(newer.scene.revision() - 1);
        n.apply_scene(&newer).unwrap();
        let subs = n.subscriptions().clone();
        assert!(matches!(n.apply_scene(&older), Err(DisplayError::StaleRevision { .. })));
        assert!(matches!(n.apply_scene(&newer), Err(DisplayError::StaleRevision { .. })));
        assert_eq!(n.subscriptions(), &subs);
        assert_eq!(n.counters().stale_snapshots, 2);
        assert!(n.subscriptions().contains_key(&c));
    }

    #[test]
    fn in_order_frames_present_at_deadlines() {
        let (s, c) = feed_scene(0.0, 0.0);
        let mut n = DisplayNode::new(wall(), TileId::new(0, 0), None);
        n.apply_scene(&snapshot(&s)).unwrap();
        let r = Rect::new(0, 0, 400, 300);
        for seq in 1..=3u64 {
            let out = n.ingest_frame(frame(c, r, seq * 100, seq as u8), seq, seq * 100 - 50).unwrap();
            assert_eq!(out, FrameOutcome::Buffered { present_at_us: seq * 100 });
            assert!(!n.tick(seq * 100 - 1));
            assert!(n.tick(seq * 100));
            assert_eq!(n.presented_seq(c), Some(seq));
        }
    }

    #[test]
    fn reordered_frame_is_discarded() {
        let (s, c) = feed_scene(0.0, 0.0);
        let mut n = DisplayNode::new(wall(), TileId::new(0, 0), None);
        n.apply_scene(&snapshot(&s)).unwrap();
        let r = Rect::new(0, 0, 400, 300);
        n.ingest_frame(frame(c, r, 100, 1), 1, 0).unwrap();
        n.tick(100);
        n.ingest_frame(frame(c, r, 300, 3), 3, 250).unwrap();
        n.tick(300);
        assert_eq!(n.presented_seq(c), Some(3));
        assert_eq!(n.ingest_frame(frame(c, r, 200, 2), 2, 310).unwrap(), FrameOutcome::Stale);
        n.tick(400);
        assert_eq!(n.presented_seq(c), Some(3));
    }

    #[test]
    fn late_frame_presented_only_if_newest() {
        let (s, c) = feed_scene(0.0, 0.0);
        let mut n = DisplayNode::new(wall(), TileId::new(0, 0), None);
        n.apply_scene(&snapshot(&s)).unwrap();
        let r = Rect::new(0, 0, 400, 300);
        // late but newest: presented right away
        n.ingest_frame(frame(c, r, 100, 1), 1, 150).unwrap();
        assert!(n.tick(150));
        assert_eq!(n.presented_seq(c), Some(1));
        // frame 3 pending, frame 2 arrives late: superseded
        n.ingest_frame(frame(c, r, 300, 3), 3, 160).unwrap();
        assert_eq!(n.ingest_frame(frame(c, r, 200, 2), 2, 250).unwrap(), FrameOutcome::Superseded);
    }

    #[test]
    fn frame_for_unsubscribed_content_is_counted() {
        let (s, c) = feed_scene(100.0, 100.0);
        let mut n = DisplayNode::new(wall(), TileId::new(2, 1), None);
        n.apply_scene(&snapshot(&s)).unwrap();
        let out = n.ingest_frame(frame(c, Rect::new(0, 0, 4, 4), 0, 0), 1, 0).unwrap();
        assert_eq!(out, FrameOutcome::Unsubscribed);
        assert_eq!(n.counters().unexpected_frames, 1);
    }

    #[test]
    fn malformed_region_is_protocol_error() {
        let (s, c) = feed_scene(0.0, 0.0);
        let mut n = DisplayNode::new(wall(), TileId::new(0, 0), None);
        n.apply_scene(&snapshot(&s)).unwrap();
        let err = n.ingest_frame(frame(c, Rect::new(390, 0, 20, 4), 0, 0), 1, 0);
        assert!(matches!(err, Err(DisplayError::Protocol(_))));
    }

    #[test]
    fn missing_frames_render_placeholder_not_black() {
        let (s, c) = feed_scene(0.0, 0.0);
        let mut n = DisplayNode::new(wall(), TileId::new(0, 0), None);
        n.apply_scene(&snapshot(&s)).unwrap();
        let fb = n.framebuffer().clone();
        assert_eq!(fb.get(1, 1), [96, 96, 96]);
        assert_eq!(fb.get(500, 500), [0, 0, 0]);
        n.ingest_frame(frame(c, Rect::new(0, 0, 400, 300), 10, 200), 1, 0).unwrap();
        n.tick(10);
        assert_eq!(n.framebuffer().get(1, 1), [200, 200, 200]);
    }

    #[test]
    fn empty_scene_is_black_and_snapshots_are_stable() {
        let s = Scene::new(wall());
        let mut n = DisplayNode::new(wall(), TileId::new(1, 1), None);
        n.apply_scene(&snapshot(&s)).ok();
        let a = n.snapshot(SnapshotMode::Digest);
        let b = n.snapshot(SnapshotMode::Digest);
        assert_eq!(a, b);
        assert_eq!((a.width, a.height), (1920, 1080));
        assert!(n.framebuffer().data().iter().all(|b| *b == 0));
        let r = n.snapshot(SnapshotMode::Raster);
        let ppm = base64::engine::general_purpose::STANDARD.decode(r.ppm_base64.unwrap()).unwrap();
        let img = Raster::from_ppm(&ppm).unwrap();
        assert_eq!((img.width(), img.height()), (1920, 1080));
    }

    #[test]
    fn digest_changes_with_visible_mutation() {
        let mut s = Scene::new(wall());
        let c = s.register_content(ContentKind::TestPattern, 64, 64, "bars", None).unwrap();
        let p = s.place(c, 10.0, 10.0, 1.0, 0.0).unwrap();
        let mut n = DisplayNode::new(wall(), TileId::new(0, 0), None);
        n.apply_scene(&snapshot(&s)).unwrap();
        let before = n.snapshot(SnapshotMode::Digest).digest;
        s.move_to(p, 11.0, 10.0).unwrap();
        n.apply_scene(&snapshot(&s)).unwrap();
        assert_ne!(n.snapshot(SnapshotMode::Digest).digest, before);
    }

    #[test]
    fn higher_z_occludes() {
        let mut s = Scene::new(wall());
        let a = s.register_content(ContentKind::TestPattern, 100, 100, "checker", None).unwrap();
        let b = s.register_content(ContentKind::TestPattern, 100, 100, "bars", None).unwrap();
        s.place(a, 0.0, 0.0, 1.0, 0.0).unwrap();
        s.place(b, 50.0, 50.0, 1.0, 0.0).unwrap();
        let mut n = DisplayNode::new(wall(), TileId::new(0, 0), None);
        n.apply_scene(&snapshot(&s)).unwrap();
        let fb = n.framebuffer();
        for y in 50..100 {
            for x in 50..100 {
                assert_eq!(fb.get(x, y), Pattern::Bars.pixel(100, 100, x - 50, y - 50, 0));
            }
        }
        assert_eq!(fb.get(10, 10), Pattern::Checker.pixel(100, 100, 10, 10, 0));
    }

    #[test]
    fn placeholder_label_renders_digits() {
        assert!(label_pixel(1, LABEL_ORIGIN + GLYPH_SCALE, LABEL_ORIGIN));
        assert!(!label_pixel(1, 0, 0));
        assert!(!label_pixel(1, LABEL_ORIGIN + 40 * GLYPH_SCALE, LABEL_ORIGIN));
    }

    #[test]
    fn offset_moves_deadlines_into_local_time() {
        let (s, c) = feed_scene(0.0, 0.0);
        let mut n = DisplayNode::new(wall(), TileId::new(0, 0), None);
        n.apply_scene(&snapshot(&s)).unwrap();
        // control clock is 1000us ahead of ours
        n.on_heartbeat_reply(&Heartbeat { t1: 0, t2: Some(1005), t3: Some(1005) }, 10);
        assert_eq!(n.clock_offset_us(), 1000);
        let out = n.ingest_frame(frame(c, Rect::new(0, 0, 400, 300), 5000, 1), 1, 0).unwrap();
        assert_eq!(out, FrameOutcome::Buffered { present_at_us: 4000 });
    }
}
