//! Multi-resolution tiled image pyramids.
//!
//! On disk a pyramid is a directory holding `manifest.json` and one binary
//! PPM per tile at `L{level}/{col}_{row}.ppm`. Level 0 is full resolution;
//! each further level is a 2×2 box average (round half up, edges clamped) of
//! the one before, until the whole image fits in a single tile. Every tile
//! read is verified against the SHA-256 recorded in the manifest.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::Rect;
use crate::raster::{Raster, RasterError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PYRAMID_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_TILE_SIZE: u32 = 256;
pub const MIN_TILE_SIZE: u32 = 64;

#[derive(Debug, Error)]
pub enum PyramidError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid pyramid input: {0}")]
    Validation(String),
    #[error("region out of range: {0}")]
    Range(String),
    #[error("corrupt tile {0}")]
    Corrupt(String),
    #[error("bad manifest: {0}")]
    Manifest(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PyramidError + '_ {
    move |source| PyramidError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PixelFormat {
    #[serde(rename = "RGB8")]
    Rgb8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelInfo {
    pub w: u32,
    pub h: u32,
    pub cols: u32,
    pub rows: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidIndex {
    pub schema_version: u32,
    pub source_w: u32,
    pub source_h: u32,
    pub tile_size: u32,
    pub levels: Vec<LevelInfo>,
    pub pixel_format: PixelFormat,
    /// Hex SHA-256 of each tile file, keyed by its path relative to the root.
    pub checksums: BTreeMap<String, String>,
}

/// A pixel rectangle at one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionRequest {
    pub level: usize,
    pub rect: Rect,
}

pub fn tile_path(level: usize, col: u32, row: u32) -> String {
    format!("L{level}/{col}_{row}.ppm")
}

/// Level dimensions from full resolution down to the first level that fits
/// in one tile.
pub fn level_dims(w: u32, h: u32, tile_size: u32) -> Vec<(u32, u32)> {
    let mut dims = vec![(w, h)];
    let (mut cw, mut ch) = (w, h);
    while cw.max(ch) > tile_size {
        cw = cw.div_ceil(2);
        ch = ch.div_ceil(2);
        dims.push((cw, ch));
    }
    dims
}

impl PyramidIndex {
    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    fn level(&self, level: usize) -> Result<&LevelInfo, PyramidError> {
        self.levels
            .get(level)
            .ok_or_else(|| PyramidError::Range(format!("level {level} of {}", self.levels.len())))
    }

    /// Chooses the level to sample when one source pixel is displayed as
    /// `ratio` wall pixels: `clamp(floor(log2(1/ratio)), 0, levels-1)`.
    pub fn select_level(&self, ratio: f64) -> usize {
        select_level(self.levels.len(), ratio)
    }

    fn validate(&self) -> Result<(), PyramidError> {
        if self.schema_version != PYRAMID_SCHEMA_VERSION {
            return Err(PyramidError::Manifest(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        let expect = level_dims(self.source_w, self.source_h, self.tile_size);
        let got: Vec<_> = self.levels.iter().map(|l| (l.w, l.h)).collect();
        if got != expect {
            return Err(PyramidError::Manifest("level dimensions inconsistent with source size".into()));
        }
        for l in &self.levels {
            if l.cols != l.w.div_ceil(self.tile_size) || l.rows != l.h.div_ceil(self.tile_size) {
                return Err(PyramidError::Manifest("tile grid inconsistent with level size".into()));
            }
        }
        Ok(())
    }
}

pub fn select_level(levels: usize, ratio: f64) -> usize {
    if levels == 0 || !(ratio > 0.0) || !ratio.is_finite() {
        return 0;
    }
    let l = (1.0 / ratio).log2().floor();
    if l <= 0.0 {
        0
    } else {
        (l as usize).min(levels - 1)
    }
}

/// Writes the pyramid for `source` into `out_dir` and returns its manifest.
pub fn build_pyramid(source: &Raster, tile_size: u32, out_dir: &Path) -> Result<PyramidIndex, PyramidError> {
    if tile_size < MIN_TILE_SIZE {
        return Err(PyramidError::Validation(format!(
            "tile_size must be at least {MIN_TILE_SIZE}, got {tile_size}"
        )));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let dims = level_dims(source.width(), source.height(), tile_size);
    let mut levels = Vec::with_capacity(dims.len());
    let mut checksums = BTreeMap::new();
    let mut current: Option<Fixed> = None;
    for (level, &(w, h)) in dims.iter().enumerate() {
        let (img, next) = match current.take() {
            None => (Cow::Borrowed(source), Fixed::from_raster(source)),
            Some(prev) => {
                let next = prev.halve();
                (Cow::Owned(next.to_raster()), next)
            }
        };
        debug_assert_eq!((img.width(), img.height()), (w, h));
        let info = LevelInfo {
            w,
            h,
            cols: w.div_ceil(tile_size),
            rows: h.div_ceil(tile_size),
        };
        let dir = out_dir.join(format!("L{level}"));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for row in 0..info.rows {
            for col in 0..info.cols {
                let rect = tile_rect(&info, tile_size, col, row);
                let bytes = img.crop(rect).expect("tile inside level").to_ppm();
                let rel = tile_path(level, col, row);
                let path = out_dir.join(&rel);
                fs::write(&path, &bytes).map_err(io_err(&path))?;
                checksums.insert(rel, hex_sha256(&bytes));
            }
        }
        levels.push(info);
        current = Some(next);
    }
    let index = PyramidIndex {
        schema_version: PYRAMID_SCHEMA_VERSION,
        source_w: source.width(),
        source_h: source.height(),
        tile_size,
        levels,
        pixel_format: PixelFormat::Rgb8,
        checksums,
    };
    let manifest = out_dir.join(MANIFEST_FILE);
    fs::write(&manifest, serde_json::to_vec_pretty(&index).expect("manifest serializes")).map_err(io_err(&manifest))?;
    Ok(index)
}

/// Level pixels with 8 fractional bits, so repeated halving rounds once
/// instead of once per level.
struct Fixed {
    w: u32,
    h: u32,
    data: Vec<u16>,
}

impl Fixed {
    fn from_raster(r: &Raster) -> Self {
        Fixed {
            w: r.width(),
            h: r.height(),
            data: r.data().iter().map(|&v| (v as u16) << 8).collect(),
        }
    }

    /// 2x2 average with the last row and column repeated on odd sizes.
    fn halve(&self) -> Fixed {
        let (w, h) = (self.w.div_ceil(2), self.h.div_ceil(2));
        let stride = self.w as usize * 3;
        let mut data = Vec::with_capacity(w as usize * h as usize * 3);
        for y in 0..h {
            let r0 = 2 * y as usize * stride;
            let r1 = (2 * y + 1).min(self.h - 1) as usize * stride;
            for x in 0..w {
                let x0 = 2 * x as usize * 3;
                let x1 = (2 * x + 1).min(self.w - 1) as usize * 3;
                for c in 0..3 {
                    let sum = self.data[r0 + x0 + c] as u32
                        + self.data[r0 + x1 + c] as u32
                        + self.data[r1 + x0 + c] as u32
                        + self.data[r1 + x1 + c] as u32;
                    data.push(((sum + 2) / 4) as u16);
                }
            }
        }
        Fixed { w, h, data }
    }

    fn to_raster(&self) -> Raster {
        let rgb = self.data.iter().map(|&v| ((v as u32 + 128) >> 8) as u8).collect();
        Raster::from_rgb(self.w, self.h, rgb).expect("sizes match")
    }
}

/// Builds from a binary PPM file.
pub fn build_pyramid_from_ppm(path: &Path, tile_size: u32, out_dir: &Path) -> Result<PyramidIndex, PyramidError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let source = Raster::from_ppm(&bytes).map_err(|e| match e {
        RasterError::Ppm(msg) => PyramidError::Validation(format!("{}: {msg}", path.display())),
        other => PyramidError::Validation(other.to_string()),
    })?;
    build_pyramid(&source, tile_size, out_dir)
}

fn tile_rect(info: &LevelInfo, tile_size: u32, col: u32, row: u32) -> Rect {
    let x = col * tile_size;
    let y = row * tile_size;
    Rect::new(
        x as i64,
        y as i64,
        tile_size.min(info.w - x) as i64,
        tile_size.min(info.h - y) as i64,
    )
}

fn hex_sha256(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Read access to a pyramid on disk. Safe to share between threads; reads
/// take no locks.
#[derive(Debug, Clone)]
pub struct Pyramid {
    root: PathBuf,
    index: PyramidIndex,
}

impl Pyramid {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, PyramidError> {
        let root = root.into();
        let path = root.join(MANIFEST_FILE);
        let text = fs::read(&path).map_err(io_err(&path))?;
        let index: PyramidIndex = serde_json::from_slice(&text).map_err(|e| PyramidError::Manifest(e.to_string()))?;
        index.validate()?;
        Ok(Pyramid { root, index })
    }

    /// Opens the pyramid whose manifest is at `manifest` (a file path).
    pub fn open_manifest(manifest: &Path) -> Result<Self, PyramidError> {
        let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        Pyramid::open(root)
    }

    pub fn index(&self) -> &PyramidIndex {
        &self.index
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Loads and verifies one tile.
    pub fn read_tile(&self, level: usize, col: u32, row: u32) -> Result<Raster, PyramidError> {
        let info = *self.index.level(level)?;
        if col >= info.cols || row >= info.rows {
            return Err(PyramidError::Range(format!("tile {col},{row} at level {level}")));
        }
        let rel = tile_path(level, col, row);
        let expected = self
            .index
            .checksums
            .get(&rel)
            .ok_or_else(|| PyramidError::Corrupt(format!("{rel}: no checksum in manifest")))?;
        let path = self.root.join(&rel);
        let bytes = fs::read(&path).map_err(|e| {
            if e.kind() == io::ErrorKind::NotFound {
                PyramidError::Corrupt(format!("{rel}: missing"))
            } else {
                PyramidError::Io { path: path.clone(), source: e }
            }
        })?;
        if &hex_sha256(&bytes) != expected {
            return Err(PyramidError::Corrupt(format!("{rel}: checksum mismatch")));
        }
        let tile = Raster::from_ppm(&bytes).map_err(|e| PyramidError::Corrupt(format!("{rel}: {e}")))?;
        let want = tile_rect(&info, self.index.tile_size, col, row);
        if tile.width() as i64 != want.w || tile.height() as i64 != want.h {
            return Err(PyramidError::Corrupt(format!("{rel}: wrong dimensions")));
        }
        Ok(tile)
    }

    /// Assembles exactly `request.rect` at `request.level` from the tiles it
    /// overlaps.
    pub fn read_region(&self, request: RegionRequest) -> Result<Raster, PyramidError> {
        let info = *self.index.level(request.level)?;
        let rect = request.rect;
        let bounds = Rect::new(0, 0, info.w as i64, info.h as i64);
        if rect.is_empty() || !bounds.contains_rect(&rect) {
            return Err(PyramidError::Range(format!(
                "{rect} outside {}x{} level {}",
                info.w, info.h, request.level
            )));
        }
        let ts = self.index.tile_size as i64;
        let mut out = Raster::new(rect.w as u32, rect.h as u32, [0, 0, 0]);
        for row in (rect.y / ts)..=((rect.bottom() - 1) / ts) {
            for col in (rect.x / ts)..=((rect.right() - 1) / ts) {
                let tile = self.read_tile(request.level, col as u32, row as u32)?;
                let (tx, ty) = (col * ts, row * ts);
                let t_rect = Rect::new(tx, ty, tile.width() as i64, tile.height() as i64);
                let hit = t_rect.intersect(&rect).expect("tile overlaps request");
                let piece = tile
                    .crop(hit.translate(-tx, -ty))
                    .expect("intersection inside tile");
                out.blit(&piece, hit.x - rect.x, hit.y - rect.y);
            }
        }
        Ok(out)
    }
}
