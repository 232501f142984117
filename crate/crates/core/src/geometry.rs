//! Wall geometry: the tile grid, its pixel canvas and its physical layout.
//!
//! Two coordinate systems coexist. The wall canvas is measured in pixels with
//! its origin at the top-left of tile (0,0); the physical wall is measured in
//! millimetres from the outer top-left corner of the same tile's bezel.
//! Rectangles are half-open everywhere: `[x, x + w) × [y, y + h)`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid wall configuration: {0}")]
    Validation(String),
    #[error("operation requires {required:?} mode but the wall is {actual:?}")]
    ModeMismatch {
        required: GeometryMode,
        actual: GeometryMode,
    },
    #[error("out of range: {0}")]
    Range(String),
}

/// How the wall canvas treats the bezels between panels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryMode {
    /// Tiles abut on the canvas; bezels are ignored.
    #[default]
    PixelContiguous,
    /// The canvas contains the mullion gaps; content behind them is not shown.
    PhysicallyAccurate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PxSize {
    pub w: u32,
    pub h: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmSize {
    pub w: f64,
    pub h: f64,
}

/// Bezel widths of a single panel in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Bezels {
    pub top: f64,
    pub left: f64,
    pub bottom: f64,
    pub right: f64,
}

/// The on-disk wall configuration (`wall.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallConfig {
    pub cols: u32,
    pub rows: u32,
    pub tile_px: PxSize,
    pub visible_mm: MmSize,
    #[serde(default)]
    pub bezels_mm: Bezels,
    #[serde(default)]
    pub mode: GeometryMode,
}

impl WallConfig {
    /// The 4×2 wall of 55" 1080p panels with 3.7/1.8 mm bezels.
    pub fn reference_wall() -> Self {
        let (w, h) = visible_from_diagonal(55.0 * 25.4, 16.0, 9.0);
        WallConfig {
            cols: 4,
            rows: 2,
            tile_px: PxSize { w: 1920, h: 1080 },
            visible_mm: MmSize { w, h },
            bezels_mm: Bezels {
                top: 3.7,
                left: 3.7,
                bottom: 1.8,
                right: 1.8,
            },
            mode: GeometryMode::PixelContiguous,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, GeometryError> {
        serde_json::from_str(text).map_err(|e| GeometryError::Validation(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("wall config serializes")
    }
}

/// Visible panel width and height for a diagonal and aspect ratio.
pub fn visible_from_diagonal(diagonal_mm: f64, aspect_w: f64, aspect_h: f64) -> (f64, f64) {
    let d = (aspect_w * aspect_w + aspect_h * aspect_h).sqrt();
    (diagonal_mm * aspect_w / d, diagonal_mm * aspect_h / d)
}

/// Zero-based tile coordinate, column left to right, row top to bottom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileId {
    pub col: u32,
    pub row: u32,
}

impl TileId {
    pub const fn new(col: u32, row: u32) -> Self {
        TileId { col, row }
    }
}

/// Column letter plus one-based row, e.g. `A1` for (0,0) and `D2` for (3,1).
impl fmt::Display for TileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut letters = Vec::new();
        let mut c = self.col + 1;
        while c > 0 {
            let rem = (c - 1) % 26;
            letters.push(b'A' + rem as u8);
            c = (c - 1) / 26;
        }
        letters.reverse();
        write!(f, "{}{}", String::from_utf8_lossy(&letters), self.row + 1)
    }
}

/// Half-open integer rectangle. Used for wall-canvas, tile-local and
/// source-space coordinates alike.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

/// A rectangle on the wall canvas. May hang off the wall.
pub type WallRect = Rect;

impl Rect {
    pub const fn new(x: i64, y: i64, w: i64, h: i64) -> Self {
        Rect { x, y, w, h }
    }

    pub fn right(&self) -> i64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> i64 {
        self.y + self.h
    }

    pub fn is_empty(&self) -> bool {
        self.w <= 0 || self.h <= 0
    }

    pub fn area(&self) -> i64 {
        if self.is_empty() {
            0
        } else {
            self.w * self.h
        }
    }

    pub fn intersect(&self, other: &Rect) -> Option<Rect> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x1 > x0 && y1 > y0).then(|| Rect::new(x0, y0, x1 - x0, y1 - y0))
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= self.x && x < self.right() && y >= self.y && y < self.bottom()
    }

    pub fn translate(&self, dx: i64, dy: i64) -> Rect {
        Rect::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    /// Smallest rectangle containing both.
    pub fn union(&self, other: &Rect) -> Rect {
        let x0 = self.x.min(other.x);
        let y0 = self.y.min(other.y);
        let x1 = self.right().max(other.right());
        let y1 = self.bottom().max(other.bottom());
        Rect::new(x0, y0, x1 - x0, y1 - y0)
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}+{}+{}", self.w, self.h, self.x, self.y)
    }
}

/// The part of a wall rectangle that lands on one tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileViewport {
    pub tile: TileId,
    /// Tile-local pixel rectangle.
    pub dest: Rect,
    /// The same pixels, relative to the origin of the mapped wall rectangle.
    pub src: Rect,
}

/// A point on the physical wall in millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmPoint {
    pub x: f64,
    pub y: f64,
}

/// Validated wall geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WallConfig", into = "WallConfig")]
pub struct TileGrid {
    config: WallConfig,
}

impl TryFrom<WallConfig> for TileGrid {
    type Error = GeometryError;

    fn try_from(config: WallConfig) -> Result<Self, Self::Error> {
        TileGrid::new(config)
    }
}

impl From<TileGrid> for WallConfig {
    fn from(grid: TileGrid) -> Self {
        grid.config
    }
}

pub fn build_wall(config: &WallConfig) -> Result<TileGrid, GeometryError> {
    TileGrid::new(config.clone())
}

fn check_positive(name: &str, v: f64) -> Result<(), GeometryError> {
    if !v.is_finite() || v <= 0.0 {
        return Err(GeometryError::Validation(format!(
            "{name} must be a positive finite number, got {v}"
        )));
    }
    Ok(())
}

impl TileGrid {
    pub fn new(config: WallConfig) -> Result<Self, GeometryError> {
        if config.cols == 0 || config.rows == 0 {
            return Err(GeometryError::Validation(format!(
                "grid must have at least one column and row, got {}x{}",
                config.cols, config.rows
            )));
        }
        if config.tile_px.w == 0 || config.tile_px.h == 0 {
            return Err(GeometryError::Validation(format!(
                "tile resolution must be at least 1x1, got {}x{}",
                config.tile_px.w, config.tile_px.h
            )));
        }
        check_positive("visible_mm.w", config.visible_mm.w)?;
        check_positive("visible_mm.h", config.visible_mm.h)?;
        let b = config.bezels_mm;
        for (name, v) in [
            ("bezels_mm.top", b.top),
            ("bezels_mm.left", b.left),
            ("bezels_mm.bottom", b.bottom),
            ("bezels_mm.right", b.right),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(GeometryError::Validation(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(TileGrid { config })
    }

    pub fn config(&self) -> &WallConfig {
        &self.config
    }

    pub fn cols(&self) -> u32 {
        self.config.cols
    }

    pub fn rows(&self) -> u32 {
        self.config.rows
    }

    pub fn tile_px(&self) -> PxSize {
        self.config.tile_px
    }

    pub fn mode(&self) -> GeometryMode {
        self.config.mode
    }

    pub fn tile_count(&self) -> usize {
        self.config.cols as usize * self.config.rows as usize
    }

    /// All tiles in row-major order.
    pub fn tiles(&self) -> impl Iterator<Item = TileId> + '_ {
        (0..self.config.rows).flat_map(move |row| (0..self.config.cols).map(move |col| TileId { col, row }))
    }

    pub fn contains_tile(&self, tile: TileId) -> bool {
        tile.col < self.config.cols && tile.row < self.config.rows
    }

    /// Logical pixel count ignoring bezels: `cols·tile_w × rows·tile_h`.
    pub fn effective_resolution(&self) -> (u64, u64) {
        (
            self.config.cols as u64 * self.config.tile_px.w as u64,
            self.config.rows as u64 * self.config.tile_px.h as u64,
        )
    }

    /// Gap between the visible areas of neighbouring tiles (horizontal, vertical).
    pub fn tile_gap_mm(&self) -> (f64, f64) {
        let b = self.config.bezels_mm;
        (b.right + b.left, b.bottom + b.top)
    }

    /// Physical size of one pixel (horizontal, vertical).
    pub fn pixel_pitch_mm(&self) -> (f64, f64) {
        (
            self.config.visible_mm.w / self.config.tile_px.w as f64,
            self.config.visible_mm.h / self.config.tile_px.h as f64,
        )
    }

    /// Size of one tile including its bezels.
    fn cell_mm(&self) -> (f64, f64) {
        let (gx, gy) = self.tile_gap_mm();
        (self.config.visible_mm.w + gx, self.config.visible_mm.h + gy)
    }

    /// Outer bounding box of the wall including every bezel.
    pub fn physical_extent(&self) -> (f64, f64) {
        let (cw, ch) = self.cell_mm();
        (cw * self.config.cols as f64, ch * self.config.rows as f64)
    }

    /// Top-left of the tile's visible area in millimetres.
    pub fn tile_origin_mm(&self, tile: TileId) -> MmPoint {
        let (cw, ch) = self.cell_mm();
        let b = self.config.bezels_mm;
        MmPoint {
            x: tile.col as f64 * cw + b.left,
            y: tile.row as f64 * ch + b.top,
        }
    }

    /// Top-left of the tile on the wall canvas.
    ///
    /// In physically accurate mode the canvas includes the mullions, converted
    /// to pixels at the panel's pixel pitch.
    pub fn tile_origin(&self, tile: TileId) -> (i64, i64) {
        let PxSize { w, h } = self.config.tile_px;
        match self.config.mode {
            GeometryMode::PixelContiguous => (tile.col as i64 * w as i64, tile.row as i64 * h as i64),
            GeometryMode::PhysicallyAccurate => {
                let (cw, ch) = self.cell_mm();
                let (px, py) = self.pixel_pitch_mm();
                (
                    (tile.col as f64 * cw / px).round() as i64,
                    (tile.row as f64 * ch / py).round() as i64,
                )
            }
        }
    }

    /// The tile's pixels on the wall canvas.
    pub fn tile_rect(&self, tile: TileId) -> Rect {
        let (x, y) = self.tile_origin(tile);
        let PxSize { w, h } = self.config.tile_px;
        Rect::new(x, y, w as i64, h as i64)
    }

    /// Size of the wall canvas. Equals the effective resolution in pixel
    /// contiguous mode.
    pub fn canvas_size(&self) -> (i64, i64) {
        let last = TileId::new(self.config.cols - 1, self.config.rows - 1);
        let r = self.tile_rect(last);
        (r.right(), r.bottom())
    }

    pub fn canvas_rect(&self) -> Rect {
        let (w, h) = self.canvas_size();
        Rect::new(0, 0, w, h)
    }

    /// Clips a wall rectangle against every tile. Tiles with no overlap are
    /// omitted; the result is in row-major tile order.
    pub fn wall_to_tile_viewports(&self, rect: &WallRect) -> Vec<TileViewport> {
        if rect.is_empty() {
            return Vec::new();
        }
        self.tiles()
            .filter_map(|tile| {
                let tr = self.tile_rect(tile);
                tr.intersect(rect).map(|hit| TileViewport {
                    tile,
                    dest: hit.translate(-tr.x, -tr.y),
                    src: hit.translate(-rect.x, -rect.y),
                })
            })
            .collect()
    }

    /// Tile and pixel under a physical point, or `None` over a bezel gap or
    /// off the wall.
    pub fn pixel_of_wallspace(&self, point: MmPoint) -> Result<Option<(TileId, (u32, u32))>, GeometryError> {
        if self.config.mode != GeometryMode::PhysicallyAccurate {
            return Err(GeometryError::ModeMismatch {
                required: GeometryMode::PhysicallyAccurate,
                actual: self.config.mode,
            });
        }
        if !point.x.is_finite() || !point.y.is_finite() || point.x < 0.0 || point.y < 0.0 {
            return Ok(None);
        }
        let (cw, ch) = self.cell_mm();
        let col = (point.x / cw).floor();
        let row = (point.y / ch).floor();
        if col >= self.config.cols as f64 || row >= self.config.rows as f64 {
            return Ok(None);
        }
        let tile = TileId::new(col as u32, row as u32);
        let origin = self.tile_origin_mm(tile);
        let (lx, ly) = (point.x - origin.x, point.y - origin.y);
        let vis = self.config.visible_mm;
        if lx < 0.0 || ly < 0.0 || lx >= vis.w || ly >= vis.h {
            return Ok(None);
        }
        let (pw, ph) = self.pixel_pitch_mm();
        let px = ((lx / pw).floor() as u32).min(self.config.tile_px.w - 1);
        let py = ((ly / ph).floor() as u32).min(self.config.tile_px.h - 1);
        Ok(Some((tile, (px, py))))
    }

    /// Physical position of a pixel's centre.
    pub fn wallspace_of_pixel(&self, tile: TileId, pixel: (u32, u32)) -> Result<MmPoint, GeometryError> {
        if !self.contains_tile(tile) {
            return Err(GeometryError::Range(format!(
                "tile {tile} outside {}x{} grid",
                self.config.cols, self.config.rows
            )));
        }
        let PxSize { w, h } = self.config.tile_px;
        if pixel.0 >= w || pixel.1 >= h {
            return Err(GeometryError::Range(format!(
                "pixel ({}, {}) outside {w}x{h} tile",
                pixel.0, pixel.1
            )));
        }
        let origin = self.tile_origin_mm(tile);
        let (pw, ph) = self.pixel_pitch_mm();
        Ok(MmPoint {
            x: origin.x + (pixel.0 as f64 + 0.5) * pw,
            y: origin.y + (pixel.1 as f64 + 0.5) * ph,
        })
    }
}
