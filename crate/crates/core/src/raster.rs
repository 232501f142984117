//! RGB8 rasters, binary PPM (P6) I/O, digests and synthetic patterns.

use std::fmt;
use std::str::FromStr;

use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::geometry::Rect;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("rectangle {rect} outside {w}x{h} raster")]
    Range { rect: Rect, w: u32, h: u32 },
    #[error("malformed PPM: {0}")]
    Ppm(String),
    #[error("pixel buffer of {got} bytes does not match {w}x{h} RGB8")]
    Size { got: usize, w: u32, h: u32 },
    #[error("unknown pattern {0:?}")]
    UnknownPattern(String),
}

/// Row-major RGB8 pixels.
#[derive(Clone, PartialEq, Eq)]
pub struct Raster {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl fmt::Debug for Raster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Raster({}x{}, digest {:016x})", self.width, self.height, self.digest())
    }
}

impl Raster {
    pub fn new(width: u32, height: u32, fill: [u8; 3]) -> Self {
        let n = width as usize * height as usize;
        let mut data = Vec::with_capacity(n * 3);
        for _ in 0..n {
            data.extend_from_slice(&fill);
        }
        Raster { width, height, data }
    }

    pub fn from_rgb(width: u32, height: u32, data: Vec<u8>) -> Result<Self, RasterError> {
        if data.len() != width as usize * height as usize * 3 {
            return Err(RasterError::Size {
                got: data.len(),
                w: width,
                h: height,
            });
        }
        Ok(Raster { width, height, data })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Raster { width, height, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bounds(&self) -> Rect {
        Rect::new(0, 0, self.width as i64, self.height as i64)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = self.offset(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: u32, y: u32, px: [u8; 3]) {
        let i = self.offset(x, y);
        self.data[i..i + 3].copy_from_slice(&px);
    }

    pub fn row(&self, y: u32) -> &[u8] {
        let start = self.offset(0, y);
        &self.data[start..start + self.width as usize * 3]
    }

    pub fn fill_rect(&mut self, rect: Rect, px: [u8; 3]) {
        if let Some(r) = rect.intersect(&self.bounds()) {
            for y in r.y..r.bottom() {
                for x in r.x..r.right() {
                    self.put(x as u32, y as u32, px);
                }
            }
        }
    }

    pub fn crop(&self, rect: Rect) -> Result<Raster, RasterError> {
        if rect.is_empty() || !self.bounds().contains_rect(&rect) {
            return Err(RasterError::Range {
                rect,
                w: self.width,
                h: self.height,
            });
        }
        let mut data = Vec::with_capacity(rect.area() as usize * 3);
        for y in rect.y..rect.bottom() {
            let start = self.offset(rect.x as u32, y as u32);
            data.extend_from_slice(&self.data[start..start + rect.w as usize * 3]);
        }
        Ok(Raster {
            width: rect.w as u32,
            height: rect.h as u32,
            data,
        })
    }

    /// Copies `src` so that its top-left lands at `(x, y)`. Pixels falling
    /// outside `self` are discarded.
    pub fn blit(&mut self, src: &Raster, x: i64, y: i64) {
        let target = Rect::new(x, y, src.width as i64, src.height as i64);
        let Some(hit) = target.intersect(&self.bounds()) else {
            return;
        };
        for row in hit.y..hit.bottom() {
            let sy = (row - y) as u32;
            let sx = (hit.x - x) as u32;
            let s = src.offset(sx, sy);
            let d = self.offset(hit.x as u32, row as u32);
            let n = hit.w as usize * 3;
            self.data[d..d + n].copy_from_slice(&src.data[s..s + n]);
        }
    }

    /// 64-bit FNV-1a over the pixel bytes.
    pub fn digest(&self) -> u64 {
        fnv1a64(&self.data)
    }

    /// Binary PPM: `P6\n<w> <h>\n255\n` followed by row-major RGB.
    pub fn to_ppm(&self) -> Vec<u8> {
        let header = format!("P6\n{} {}\n255\n", self.width, self.height);
        let mut out = Vec::with_capacity(header.len() + self.data.len());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    /// Parses a binary PPM with maxval 255. Comments are accepted on input.
    pub fn from_ppm(bytes: &[u8]) -> Result<Raster, RasterError> {
        let mut pos = 0usize;
        let mut fields: Vec<u64> = Vec::with_capacity(3);
        let magic = next_token(bytes, &mut pos).ok_or_else(|| RasterError::Ppm("empty input".into()))?;
        if magic != b"P6" {
            return Err(RasterError::Ppm("expected P6 magic".into()));
        }
        while fields.len() < 3 {
            let tok = next_token(bytes, &mut pos).ok_or_else(|| RasterError::Ppm("truncated header".into()))?;
            let s = std::str::from_utf8(tok).map_err(|_| RasterError::Ppm("non-ascii header".into()))?;
            fields.push(s.parse().map_err(|_| RasterError::Ppm(format!("bad header field {s:?}")))?);
        }
        // exactly one whitespace byte separates the header from the pixels
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(RasterError::Ppm("missing pixel data".into()));
        }
        pos += 1;
        let (w, h, maxval) = (fields[0], fields[1], fields[2]);
        if maxval != 255 {
            return Err(RasterError::Ppm(format!("unsupported maxval {maxval}")));
        }
        if w == 0 || h == 0 || w > u32::MAX as u64 || h > u32::MAX as u64 {
            return Err(RasterError::Ppm(format!("bad dimensions {w}x{h}")));
        }
        let need = (w as usize)
            .checked_mul(h as usize)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| RasterError::Ppm("dimensions overflow".into()))?;
        let body = &bytes[pos..];
        if body.len() != need {
            return Err(RasterError::Ppm(format!(
                "expected {need} pixel bytes, found {}",
                body.len()
            )));
        }
        Ok(Raster {
            width: w as u32,
            height: h as u32,
            data: body.to_vec(),
        })
    }

    /// One level of 2×2 box averaging with round-half-up. Odd trailing
    /// rows/columns average against a replicated edge.
    pub fn halve(&self) -> Raster {
        let w = self.width.div_ceil(2);
        let h = self.height.div_ceil(2);
        let mut data = Vec::with_capacity(w as usize * h as usize * 3);
        for y in 0..h {
            let y0 = 2 * y;
            let y1 = (2 * y + 1).min(self.height - 1);
            let r0 = self.row(y0);
            let r1 = self.row(y1);
            for x in 0..w {
                let x0 = (2 * x) as usize * 3;
                let x1 = ((2 * x + 1).min(self.width - 1)) as usize * 3;
                for c in 0..3 {
                    let sum = r0[x0 + c] as u32 + r0[x1 + c] as u32 + r1[x0 + c] as u32 + r1[x1 + c] as u32;
                    data.push(((sum + 2) / 4) as u8);
                }
            }
        }
        Raster { width: w, height: h, data }
    }

    /// Area-average resample to an exact size. Each output pixel averages the
    /// source pixels whose index falls in its integer footprint.
    pub fn box_resize(&self, out_w: u32, out_h: u32) -> Raster {
        let span = |i: u32, n_out: u32, n_in: u32| {
            let a = (i as u64 * n_in as u64 / n_out as u64) as u32;
            let b = (((i as u64 + 1) * n_in as u64).div_ceil(n_out as u64)) as u32;
            (a, b.max(a + 1).min(n_in))
        };
        Raster::from_fn(out_w, out_h, |x, y| {
            let (x0, x1) = span(x, out_w, self.width);
            let (y0, y1) = span(y, out_h, self.height);
            let mut acc = [0u64; 3];
            for sy in y0..y1 {
                for sx in x0..x1 {
                    let p = self.get(sx, sy);
                    for c in 0..3 {
                        acc[c] += p[c] as u64;
                    }
                }
            }
            let n = ((x1 - x0) * (y1 - y0)) as u64;
            [
                ((acc[0] * 2 + n) / (2 * n)) as u8,
                ((acc[1] * 2 + n) / (2 * n)) as u8,
                ((acc[2] * 2 + n) / (2 * n)) as u8,
            ]
        })
    }

    /// Box-downsampled copy whose longest side is `longest` pixels (never
    /// upscales).
    pub fn thumbnail(&self, longest: u32) -> Raster {
        let (tw, th) = thumbnail_size(self.width, self.height, longest);
        self.box_resize(tw, th)
    }
}

pub fn thumbnail_size(w: u32, h: u32, longest: u32) -> (u32, u32) {
    let m = w.max(h);
    if m <= longest {
        return (w, h);
    }
    let scale = |v: u32| (((v as u64 * longest as u64 * 2 + m as u64) / (2 * m as u64)) as u32).max(1);
    (scale(w), scale(h))
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (*pos > start).then(|| &bytes[start..*pos])
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Serialize, Deserialize)]
struct RasterRepr {
    w: u32,
    h: u32,
    rgb: String,
}

impl Serialize for Raster {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        RasterRepr {
            w: self.width,
            h: self.height,
            rgb: base64::engine::general_purpose::STANDARD.encode(&self.data),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Raster {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = RasterRepr::deserialize(d)?;
        let data = base64::engine::general_purpose::STANDARD
            .decode(r.rgb)
            .map_err(serde::de::Error::custom)?;
        Raster::from_rgb(r.w, r.h, data).map_err(serde::de::Error::custom)
    }
}

/// Deterministic synthetic content, evaluated per pixel so display nodes can
/// render it without any network traffic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pattern {
    /// Colour encodes the row-major pixel index, so every pixel of an
    /// instance with at most 2^24 pixels is distinct.
    Unique,
    Gradient,
    Checker,
    Bars,
}

impl Pattern {
    pub fn name(&self) -> &'static str {
        match self {
            Pattern::Unique => "unique",
            Pattern::Gradient => "gradient",
            Pattern::Checker => "checker",
            Pattern::Bars => "bars",
        }
    }

    /// Colour at source pixel `(x, y)` of a `w×h` instance on frame `frame`.
    #[inline]
    pub fn pixel(&self, w: u32, h: u32, x: u32, y: u32, frame: u64) -> [u8; 3] {
        let f = frame as u32;
        match self {
            Pattern::Unique => {
                let idx = (y as u64 * w as u64 + x as u64 + frame.wrapping_mul(7919)) & 0xff_ffff;
                [(idx >> 16) as u8, (idx >> 8) as u8, idx as u8]
            }
            Pattern::Gradient => {
                let r = if w > 1 { x * 255 / (w - 1) } else { 0 };
                let g = if h > 1 { y * 255 / (h - 1) } else { 0 };
                [r as u8, g as u8, ((x ^ y).wrapping_add(f)) as u8]
            }
            Pattern::Checker => {
                let on = ((x.wrapping_add(f)) / 32 + y / 32) % 2 == 0;
                if on {
                    [235, 235, 235]
                } else {
                    [16, 16, 16]
                }
            }
            Pattern::Bars => {
                const BARS: [[u8; 3]; 8] = [
                    [235, 235, 235],
                    [235, 235, 16],
                    [16, 235, 235],
                    [16, 235, 16],
                    [235, 16, 235],
                    [235, 16, 16],
                    [16, 16, 235],
                    [16, 16, 16],
                ];
                let i = ((x as u64 * 8 / w.max(1) as u64) as u32 + f) % 8;
                BARS[i as usize]
            }
        }
    }

    pub fn render(&self, w: u32, h: u32, frame: u64) -> Raster {
        Raster::from_fn(w, h, |x, y| self.pixel(w, h, x, y, frame))
    }
}

impl FromStr for Pattern {
    type Err = RasterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unique" => Ok(Pattern::Unique),
            "gradient" => Ok(Pattern::Gradient),
            "checker" => Ok(Pattern::Checker),
            "bars" => Ok(Pattern::Bars),
            other => Err(RasterError::UnknownPattern(other.to_string())),
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
