//! The authoritative model of what is on the wall.
//!
//! A [`Scene`] owns the registered content objects and their placements.
//! Every successful mutation advances `revision` by exactly one; failed
//! mutations leave the scene untouched. Display nodes and UIs receive whole
//! scenes and discard any whose revision is not newer than what they hold.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Rect, TileGrid, TileId, WallConfig};
use crate::raster::{Pattern, Raster};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("malformed environment: {0}")]
    Parse(String),
}

impl SceneError {
    /// Stable code carried in NACKs.
    pub fn code(&self) -> &'static str {
        match self {
            SceneError::NotFound(_) => "NotFound",
            SceneError::Validation(_) => "Validation",
            SceneError::Parse(_) => "Parse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContentId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PlacementId(pub u64);

impl fmt::Display for ContentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

impl fmt::Display for PlacementId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentKind {
    /// Still image served from a pyramid tile store. `source_ref` is the
    /// manifest path relative to the pyramid root.
    PyramidImage,
    /// Frames from a sender. `source_ref` is the sender's stable name.
    SenderFeed,
    /// Frame-paced frames from a streamer. `source_ref` is the streamer's name.
    Stream,
    /// Procedural pattern rendered by every display node. `source_ref` is the
    /// pattern name.
    TestPattern,
}

impl ContentKind {
    /// Whether pixels arrive as FRAME messages from a live source.
    pub fn is_live(&self) -> bool {
        matches!(self, ContentKind::SenderFeed | ContentKind::Stream)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentObject {
    pub id: ContentId,
    pub kind: ContentKind,
    pub natural_w: u32,
    pub natural_h: u32,
    pub source_ref: String,
    #[serde(default = "default_true")]
    pub online: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thumbnail: Option<Raster>,
}

fn default_true() -> bool {
    true
}

impl ContentObject {
    pub fn new(id: ContentId, kind: ContentKind, natural_w: u32, natural_h: u32, source_ref: impl Into<String>) -> Self {
        ContentObject {
            id,
            kind,
            natural_w,
            natural_h,
            source_ref: source_ref.into(),
            online: true,
            thumbnail: None,
        }
    }

    pub fn natural_rect(&self) -> Rect {
        Rect::new(0, 0, self.natural_w as i64, self.natural_h as i64)
    }

    fn validate(&self) -> Result<(), SceneError> {
        if self.natural_w == 0 || self.natural_h == 0 {
            return Err(SceneError::Validation(format!(
                "content {} has empty natural size {}x{}",
                self.id, self.natural_w, self.natural_h
            )));
        }
        if self.source_ref.is_empty() {
            return Err(SceneError::Validation(format!("content {} has no source reference", self.id)));
        }
        if self.kind == ContentKind::TestPattern {
            Pattern::from_str(&self.source_ref).map_err(|e| SceneError::Validation(e.to_string()))?;
        }
        Ok(())
    }
}

/// Where one content object sits on the wall.
///
/// `(x, y)` is the top-left of the unrotated, scaled box in wall pixels. The
/// box is rotated counter-clockwise about its centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub id: PlacementId,
    pub content: ContentId,
    pub x: f64,
    pub y: f64,
    pub scale: f64,
    pub rotation_deg: f64,
    pub z: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZDirection {
    Raise,
    Lower,
}

/// Exact cosine and sine for quarter turns, libm otherwise.
pub fn rotation_cos_sin(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    if r == 0.0 {
        (1.0, 0.0)
    } else if r == 90.0 {
        (0.0, 1.0)
    } else if r == 180.0 {
        (-1.0, 0.0)
    } else if r == 270.0 {
        (0.0, -1.0)
    } else {
        let rad = r.to_radians();
        (rad.cos(), rad.sin())
    }
}

pub fn is_quarter_turn(deg: f64) -> bool {
    deg.rem_euclid(90.0) == 0.0
}

/// Axis-aligned bounds of a displayed placement, `(x0, y0, x1, y1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Bounds {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    /// Canvas pixels whose centres fall inside the bounds.
    pub fn pixel_rect(&self) -> Option<Rect> {
        let x0 = (self.x0 - 0.5).ceil() as i64;
        let y0 = (self.y0 - 0.5).ceil() as i64;
        let x1 = (self.x1 - 0.5).ceil() as i64;
        let y1 = (self.y1 - 0.5).ceil() as i64;
        (x1 > x0 && y1 > y0).then(|| Rect::new(x0, y0, x1 - x0, y1 - y0))
    }
}

/// Affine map from a destination pixel index to a continuous source
/// coordinate: `u = a·px + b·py + c`, `v = d·px + e·py + f`. The pixel centre
/// offset is folded into `c` and `f`; nearest-neighbour sampling takes the
/// floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleTransform {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
}

impl SampleTransform {
    #[inline]
    pub fn map(&self, px: i64, py: i64) -> (f64, f64) {
        let (x, y) = (px as f64, py as f64);
        (self.a * x + self.b * y + self.c, self.d * x + self.e * y + self.f)
    }
}

/// The part of one placement that one tile draws.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibleRegion {
    pub tile: TileId,
    /// Tight tile-local bounds of the covered pixels.
    pub dest: Rect,
    pub transform: SampleTransform,
    /// Integer source-space bounds of every sample taken by `dest`.
    pub footprint: Rect,
    /// Covered `[x0, x1)` span for each row of `dest`, top to bottom.
    pub spans: Vec<(i64, i64)>,
    natural: (u32, u32),
}

impl VisibleRegion {
    /// Source pixel sampled by tile pixel `(px, py)`, if the placement covers it.
    #[inline]
    pub fn sample(&self, px: i64, py: i64) -> Option<(u32, u32)> {
        let (u, v) = self.transform.map(px, py);
        source_index(u, v, self.natural)
    }

    /// Iterates `(tile_x, tile_y, src_x, src_y)` over every covered pixel.
    pub fn pixels(&self) -> impl Iterator<Item = (i64, i64, u32, u32)> + '_ {
        self.spans.iter().enumerate().flat_map(move |(i, &(x0, x1))| {
            let py = self.dest.y + i as i64;
            (x0..x1).filter_map(move |px| self.sample(px, py).map(|(u, v)| (px, py, u, v)))
        })
    }
}

#[inline]
fn source_index(u: f64, v: f64, natural: (u32, u32)) -> Option<(u32, u32)> {
    if u >= 0.0 && v >= 0.0 && u < natural.0 as f64 && v < natural.1 as f64 {
        Some((u as u32, v as u32))
    } else {
        None
    }
}

/// Covered pixel interval of row `py` within `[lo, hi)`.
fn row_span(t: &SampleTransform, natural: (u32, u32), py: i64, lo: i64, hi: i64) -> Option<(i64, i64)> {
    let inside = |px: i64| {
        let (u, v) = t.map(px, py);
        source_index(u, v, natural).is_some()
    };
    // Solve 0 <= u < w and 0 <= v < h for px, then settle the endpoints by
    // direct evaluation so the span agrees exactly with `inside`.
    let mut a = lo as f64;
    let mut b = hi as f64;
    let y = py as f64;
    for (slope, offset, limit) in [
        (t.a, t.b * y + t.c, natural.0 as f64),
        (t.d, t.e * y + t.f, natural.1 as f64),
    ] {
        if slope == 0.0 {
            if offset < 0.0 || offset >= limit {
                return None;
            }
        } else {
            let p0 = -offset / slope;
            let p1 = (limit - offset) / slope;
            let (s, e) = if p0 < p1 { (p0, p1) } else { (p1, p0) };
            a = a.max(s.floor() - 1.0);
            b = b.min(e.ceil() + 1.0);
        }
    }
    if a >= b {
        return None;
    }
    let mut x0 = (a as i64).clamp(lo, hi);
    let mut x1 = (b as i64).clamp(lo, hi);
    while x0 < x1 && !inside(x0) {
        x0 += 1;
    }
    while x1 > x0 && !inside(x1 - 1) {
        x1 -= 1;
    }
    while x0 > lo && inside(x0 - 1) {
        x0 -= 1;
    }
    while x1 < hi && inside(x1) {
        x1 += 1;
    }
    (x0 < x1).then_some((x0, x1))
}

/// Versioned wall layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    revision: u64,
    wall: TileGrid,
    contents: BTreeMap<ContentId, ContentObject>,
    /// Sorted by ascending z.
    placements: Vec<Placement>,
    next_content: u64,
    next_placement: u64,
}

impl Scene {
    pub fn new(wall: TileGrid) -> Self {
        Scene {
            revision: 0,
            wall,
            contents: BTreeMap::new(),
            placements: Vec::new(),
            next_content: 1,
            next_placement: 1,
        }
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn wall(&self) -> &TileGrid {
        &self.wall
    }

    pub fn contents(&self) -> impl Iterator<Item = &ContentObject> {
        self.contents.values()
    }

    pub fn content(&self, id: ContentId) -> Option<&ContentObject> {
        self.contents.get(&id)
    }

    /// Placements in drawing order (ascending z).
    pub fn placements(&self) -> &[Placement] {
        &self.placements
    }

    pub fn placement(&self, id: PlacementId) -> Option<&Placement> {
        self.placements.iter().find(|p| p.id == id)
    }

    /// Moves the revision counter forward so that a replacement scene still
    /// supersedes everything previously published.
    pub fn rebase_revision(&mut self, revision: u64) {
        self.revision = revision;
    }

    /// Copy without thumbnails, for replication.
    pub fn without_thumbnails(&self) -> Scene {
        let mut s = self.clone();
        for c in s.contents.values_mut() {
            c.thumbnail = None;
        }
        s
    }

    fn bump(&mut self) {
        self.revision += 1;
    }

    fn index_of(&self, id: PlacementId) -> Result<usize, SceneError> {
        self.placements
            .iter()
            .position(|p| p.id == id)
            .ok_or_else(|| SceneError::NotFound(format!("placement {id}")))
    }

    /// Reserves a content id without changing the scene.
    pub fn allocate_content_id(&mut self) -> ContentId {
        let id = ContentId(self.next_content);
        self.next_content += 1;
        id
    }

    /// Registers a content object under a fresh id.
    pub fn register_content(
        &mut self,
        kind: ContentKind,
        natural_w: u32,
        natural_h: u32,
        source_ref: impl Into<String>,
        thumbnail: Option<Raster>,
    ) -> Result<ContentId, SceneError> {
        let mut obj = ContentObject::new(ContentId(self.next_content), kind, natural_w, natural_h, source_ref);
        obj.thumbnail = thumbnail;
        obj.validate()?;
        self.next_content += 1;
        let id = obj.id;
        self.contents.insert(id, obj);
        self.bump();
        Ok(id)
    }

    /// Inserts or replaces a content object under its own id. Existing
    /// placements of a replaced object keep referring to it.
    pub fn upsert_content(&mut self, obj: ContentObject) -> Result<(), SceneError> {
        obj.validate()?;
        self.next_content = self.next_content.max(obj.id.0 + 1);
        self.contents.insert(obj.id, obj);
        self.bump();
        Ok(())
    }

    /// Flags a content object on- or offline. Returns whether anything
    /// changed; no-ops do not advance the revision.
    pub fn set_content_online(&mut self, id: ContentId, online: bool) -> Result<bool, SceneError> {
        let c = self
            .contents
            .get_mut(&id)
            .ok_or_else(|| SceneError::NotFound(format!("content {id}")))?;
        if c.online == online {
            return Ok(false);
        }
        c.online = online;
        self.bump();
        Ok(true)
    }

    pub fn place(&mut self, content: ContentId, x: f64, y: f64, scale: f64, rotation_deg: f64) -> Result<PlacementId, SceneError> {
        if !self.contents.contains_key(&content) {
            return Err(SceneError::NotFound(format!("content {content}")));
        }
        check_scale(scale)?;
        check_finite("position", x)?;
        check_finite("position", y)?;
        check_finite("rotation", rotation_deg)?;
        let z = self.placements.last().map_or(0, |p| p.z + 1);
        let id = PlacementId(self.next_placement);
        self.next_placement += 1;
        self.placements.push(Placement {
            id,
            content,
            x,
            y,
            scale,
            rotation_deg,
            z,
        });
        self.bump();
        Ok(id)
    }

    pub fn move_to(&mut self, id: PlacementId, x: f64, y: f64) -> Result<(), SceneError> {
        let i = self.index_of(id)?;
        check_finite("position", x)?;
        check_finite("position", y)?;
        self.placements[i].x = x;
        self.placements[i].y = y;
        self.bump();
        Ok(())
    }

    pub fn resize(&mut self, id: PlacementId, scale: f64) -> Result<(), SceneError> {
        let i = self.index_of(id)?;
        check_scale(scale)?;
        self.placements[i].scale = scale;
        self.bump();
        Ok(())
    }

    pub fn rotate(&mut self, id: PlacementId, rotation_deg: f64) -> Result<(), SceneError> {
        let i = self.index_of(id)?;
        check_finite("rotation", rotation_deg)?;
        self.placements[i].rotation_deg = rotation_deg;
        self.bump();
        Ok(())
    }

    /// Swaps z with the neighbour above or below. At the top (or bottom)
    /// already, the order is unchanged but the command still succeeds.
    pub fn set_z(&mut self, id: PlacementId, dir: ZDirection) -> Result<(), SceneError> {
        let i = self.index_of(id)?;
        let j = match dir {
            ZDirection::Raise if i + 1 < self.placements.len() => Some(i + 1),
            ZDirection::Lower if i > 0 => Some(i - 1),
            _ => None,
        };
        if let Some(j) = j {
            let (zi, zj) = (self.placements[i].z, self.placements[j].z);
            self.placements[i].z = zj;
            self.placements[j].z = zi;
            self.placements.swap(i, j);
        }
        self.bump();
        Ok(())
    }

    pub fn remove(&mut self, id: PlacementId) -> Result<(), SceneError> {
        let i = self.index_of(id)?;
        self.placements.remove(i);
        self.bump();
        Ok(())
    }

    /// Axis-aligned bounds of the scaled, rotated box.
    pub fn displayed_bounds(&self, p: &Placement) -> Option<Bounds> {
        let c = self.contents.get(&p.content)?;
        Some(placement_bounds(p, c))
    }

    /// Per-tile pieces of a placement with their sampling transforms. Tiles
    /// the placement does not touch are absent.
    pub fn visible_regions(&self, id: PlacementId) -> Result<Vec<VisibleRegion>, SceneError> {
        let p = self
            .placement(id)
            .ok_or_else(|| SceneError::NotFound(format!("placement {id}")))?;
        let c = self
            .contents
            .get(&p.content)
            .ok_or_else(|| SceneError::NotFound(format!("content {}", p.content)))?;
        Ok(regions_for(&self.wall, p, c, None))
    }

    /// Like [`Scene::visible_regions`] but only for one tile.
    pub fn visible_regions_on(&self, id: PlacementId, tile: TileId) -> Result<Option<VisibleRegion>, SceneError> {
        let p = self
            .placement(id)
            .ok_or_else(|| SceneError::NotFound(format!("placement {id}")))?;
        let c = self
            .contents
            .get(&p.content)
            .ok_or_else(|| SceneError::NotFound(format!("content {}", p.content)))?;
        Ok(regions_for(&self.wall, p, c, Some(tile)).pop())
    }
}

fn check_scale(scale: f64) -> Result<(), SceneError> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(SceneError::Validation(format!("scale must be positive, got {scale}")));
    }
    Ok(())
}

fn check_finite(what: &str, v: f64) -> Result<(), SceneError> {
    if !v.is_finite() {
        return Err(SceneError::Validation(format!("{what} must be finite, got {v}")));
    }
    Ok(())
}

pub fn placement_bounds(p: &Placement, c: &ContentObject) -> Bounds {
    let hw = c.natural_w as f64 * p.scale / 2.0;
    let hh = c.natural_h as f64 * p.scale / 2.0;
    let (cx, cy) = (p.x + hw, p.y + hh);
    let (cos, sin) = rotation_cos_sin(p.rotation_deg);
    let ex = (hw * cos).abs() + (hh * sin).abs();
    let ey = (hw * sin).abs() + (hh * cos).abs();
    Bounds {
        x0: cx - ex,
        y0: cy - ey,
        x1: cx + ex,
        y1: cy + ey,
    }
}

/// Sampling transform for canvas pixels offset by `origin`.
pub fn placement_transform(p: &Placement, c: &ContentObject, origin: (i64, i64)) -> SampleTransform {
    let hw = c.natural_w as f64 * p.scale / 2.0;
    let hh = c.natural_h as f64 * p.scale / 2.0;
    let (cx, cy) = (p.x + hw, p.y + hh);
    let (cos, sin) = rotation_cos_sin(p.rotation_deg);
    let inv = 1.0 / p.scale;
    // canvas point (X, Y) -> source: rotate (X - cx, Y - cy) by -θ, unscale,
    // shift to the source centre
    let dx0 = origin.0 as f64 + 0.5 - cx;
    let dy0 = origin.1 as f64 + 0.5 - cy;
    SampleTransform {
        a: cos * inv,
        b: -sin * inv,
        c: (dx0 * cos - dy0 * sin) * inv + c.natural_w as f64 / 2.0,
        d: sin * inv,
        e: cos * inv,
        f: (dx0 * sin + dy0 * cos) * inv + c.natural_h as f64 / 2.0,
    }
}

fn regions_for(wall: &TileGrid, p: &Placement, c: &ContentObject, only: Option<TileId>) -> Vec<VisibleRegion> {
    let Some(px_rect) = placement_bounds(p, c).pixel_rect() else {
        return Vec::new();
    };
    let natural = (c.natural_w, c.natural_h);
    let viewports = match only {
        Some(tile) => {
            let tr = wall.tile_rect(tile);
            tr.intersect(&px_rect)
                .map(|hit| {
                    vec![crate::geometry::TileViewport {
                        tile,
                        dest: hit.translate(-tr.x, -tr.y),
                        src: hit.translate(-px_rect.x, -px_rect.y),
                    }]
                })
                .unwrap_or_default()
        }
        None => wall.wall_to_tile_viewports(&px_rect),
    };
    let mut out = Vec::with_capacity(viewports.len());
    for vp in viewports {
        let origin = wall.tile_origin(vp.tile);
        let t = placement_transform(p, c, origin);
        let mut rows: Vec<(i64, (i64, i64))> = Vec::new();
        for py in vp.dest.y..vp.dest.bottom() {
            if let Some(span) = row_span(&t, natural, py, vp.dest.x, vp.dest.right()) {
                rows.push((py, span));
            }
        }
        let (Some(first), Some(last)) = (rows.first(), rows.last()) else {
            continue;
        };
        let (y0, y1) = (first.0, last.0 + 1);
        let x0 = rows.iter().map(|r| r.1 .0).min().unwrap();
        let x1 = rows.iter().map(|r| r.1 .1).max().unwrap();
        let dest = Rect::new(x0, y0, x1 - x0, y1 - y0);
        // covered rows form one interval for a convex shape; empty rows in
        // between cannot occur, but keep the span table dense regardless
        let mut spans = vec![(0, 0); dest.h as usize];
        let (mut umin, mut vmin, mut umax, mut vmax) = (u32::MAX, u32::MAX, 0u32, 0u32);
        for (py, (s0, s1)) in &rows {
            spans[(py - y0) as usize] = (*s0, *s1);
            // sample extremes of an affine map over a segment are at its ends
            for px in [*s0, *s1 - 1] {
                let (u, v) = t.map(px, *py);
                if let Some((su, sv)) = source_index(u, v, natural) {
                    umin = umin.min(su);
                    vmin = vmin.min(sv);
                    umax = umax.max(su);
                    vmax = vmax.max(sv);
                }
            }
        }
        let footprint = Rect::new(
            umin as i64,
            vmin as i64,
            (umax - umin) as i64 + 1,
            (vmax - vmin) as i64 + 1,
        );
        out.push(VisibleRegion {
            tile: vp.tile,
            dest,
            transform: t,
            footprint,
            spans,
            natural,
        });
    }
    out
}

pub const ENVIRONMENT_SCHEMA_VERSION: u32 = 1;

/// Persisted layout. Geometry is in wall pixels, rotation in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentDoc {
    pub schema_version: u32,
    pub wall: WallConfig,
    pub contents: Vec<ContentObject>,
    pub placements: Vec<Placement>,
}

impl EnvironmentDoc {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("environment serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        serde_json::from_str(text).map_err(|e| SceneError::Parse(e.to_string()))
    }
}

pub fn save_environment(scene: &Scene) -> EnvironmentDoc {
    EnvironmentDoc {
        schema_version: ENVIRONMENT_SCHEMA_VERSION,
        wall: scene.wall.config().clone(),
        contents: scene
            .contents
            .values()
            .map(|c| ContentObject {
                thumbnail: None,
                online: true,
                ..c.clone()
            })
            .collect(),
        placements: scene.placements.clone(),
    }
}

/// Supplies the content objects currently available, so that a saved layout
/// can be re-attached to live sources.
pub trait ContentRegistry {
    fn live_contents(&self) -> Vec<ContentObject>;
}

/// No live sources.
pub struct NoLiveContent;

impl ContentRegistry for NoLiveContent {
    fn live_contents(&self) -> Vec<ContentObject> {
        Vec::new()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedEnvironment {
    pub scene: Scene,
    /// One entry per live-feed content restored as an offline placeholder.
    pub warnings: Vec<String>,
}

/// Rebuilds a scene from a saved document.
///
/// Live contents from `registry` are matched by `(kind, source_ref)` and
/// keep their current ids; saved live feeds with no match are kept as
/// offline placeholders. The returned scene starts at revision 0.
pub fn load_environment(
    doc: &EnvironmentDoc,
    registry: &dyn ContentRegistry,
    wall: &TileGrid,
) -> Result<LoadedEnvironment, SceneError> {
    if doc.schema_version != ENVIRONMENT_SCHEMA_VERSION {
        return Err(SceneError::Validation(format!(
            "unsupported environment schema_version {}",
            doc.schema_version
        )));
    }
    let saved_wall = TileGrid::new(doc.wall.clone()).map_err(|e| SceneError::Validation(e.to_string()))?;
    if &saved_wall != wall {
        return Err(SceneError::Validation(
            "environment was saved for a different wall configuration".into(),
        ));
    }
    let mut scene = Scene::new(wall.clone());
    let live = registry.live_contents();
    for c in &live {
        scene.contents.insert(c.id, c.clone());
        scene.next_content = scene.next_content.max(c.id.0 + 1);
    }
    let mut remap: BTreeMap<ContentId, ContentId> = BTreeMap::new();
    let mut unmatched = Vec::new();
    for saved in &doc.contents {
        saved.validate()?;
        if remap.contains_key(&saved.id) {
            return Err(SceneError::Parse(format!("duplicate content id {}", saved.id)));
        }
        match live.iter().find(|c| c.kind == saved.kind && c.source_ref == saved.source_ref) {
            Some(c) => {
                remap.insert(saved.id, c.id);
            }
            None => {
                remap.insert(saved.id, saved.id);
                unmatched.push(saved);
            }
        }
    }
    let mut warnings = Vec::new();
    // saved ids not colliding with live ones are kept; the rest move past the
    // highest id in use
    let max_saved = doc.contents.iter().map(|c| c.id.0).max().unwrap_or(0);
    scene.next_content = scene.next_content.max(max_saved + 1);
    for saved in unmatched {
        let mut obj = ContentObject {
            thumbnail: None,
            online: !saved.kind.is_live(),
            ..saved.clone()
        };
        if scene.contents.contains_key(&obj.id) {
            obj.id = ContentId(scene.next_content);
            scene.next_content += 1;
            remap.insert(saved.id, obj.id);
        }
        if !obj.online {
            warnings.push(format!(
                "source {:?} ({:?}) is offline; its placements show placeholders",
                obj.source_ref, obj.kind
            ));
        }
        scene.contents.insert(obj.id, obj);
    }
    let mut placements = doc.placements.clone();
    placements.sort_by_key(|p| p.z);
    for w in placements.windows(2) {
        if w[0].z == w[1].z {
            return Err(SceneError::Parse(format!("duplicate z-order {}", w[0].z)));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for p in &mut placements {
        if !seen.insert(p.id) {
            return Err(SceneError::Parse(format!("duplicate placement id {}", p.id)));
        }
        p.content = *remap
            .get(&p.content)
            .ok_or_else(|| SceneError::Parse(format!("placement {} references unknown content {}", p.id, p.content)))?;
        check_scale(p.scale)?;
        check_finite("position", p.x)?;
        check_finite("position", p.y)?;
        check_finite("rotation", p.rotation_deg)?;
    }
    scene.next_placement = placements.iter().map(|p| p.id.0 + 1).max().unwrap_or(1);
    scene.placements = placements;
    Ok(LoadedEnvironment { scene, warnings })
}
