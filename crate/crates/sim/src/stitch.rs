//! Reassembling tile framebuffers into one wall image.

use std::collections::BTreeMap;

use tilewall::geometry::{GeometryMode, TileGrid, TileId};
use tilewall::raster::Raster;

use crate::SimError;

pub const MULLION_GRAY: [u8; 3] = [128, 128, 128];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StitchMode {
    /// Tiles side by side, no gaps.
    #[default]
    Contiguous,
    /// Bezel gaps drawn as gray bars at the panel pixel pitch.
    Mullions,
}

/// Builds the wall composite from one framebuffer per tile.
pub fn stitch(grid: &TileGrid, tiles: &BTreeMap<TileId, Raster>, mode: StitchMode) -> Result<Raster, SimError> {
    let missing: Vec<TileId> = grid.tiles().filter(|t| !tiles.contains_key(t)).collect();
    if !missing.is_empty() {
        return Err(SimError::MissingTiles(missing));
    }
    let px = grid.tile_px();
    for (t, r) in tiles {
        if !grid.contains_tile(*t) {
            return Err(SimError::Stitch(format!("tile {t} is not on this wall")));
        }
        if (r.width(), r.height()) != (px.w, px.h) {
            return Err(SimError::Stitch(format!(
                "tile {t} is {}x{}, expected {}x{}",
                r.width(),
                r.height(),
                px.w,
                px.h
            )));
        }
    }
    let layout = match mode {
        StitchMode::Contiguous => {
            let mut cfg = grid.config().clone();
            cfg.mode = GeometryMode::PixelContiguous;
            TileGrid::new(cfg)?
        }
        StitchMode::Mullions => {
            let mut cfg = grid.config().clone();
            cfg.mode = GeometryMode::PhysicallyAccurate;
            TileGrid::new(cfg)?
        }
    };
    let (w, h) = layout.canvas_size();
    let mut out = Raster::new(w as u32, h as u32, MULLION_GRAY);
    for tile in grid.tiles() {
        let r = layout.tile_rect(tile);
        out.blit(&tiles[&tile], r.x, r.y);
    }
    Ok(out)
}

/// File name used for a tile snapshot on disk.
pub fn tile_file_name(tile: TileId) -> String {
    format!("tile_{}_{}.ppm", tile.col, tile.row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tilewall::geometry::{build_wall, PxSize, WallConfig};
    use tilewall::raster::Pattern;

    fn tiles_of(grid: &TileGrid, wall: &Raster) -> BTreeMap<TileId, Raster> {
        grid.tiles().map(|t| (t, wall.crop(grid.tile_rect(t)).unwrap())).collect()
    }

    #[test]
    fn reference_wall_composite_size() {
        let grid = build_wall(&WallConfig::reference_wall()).unwrap();
        let tiles: BTreeMap<_, _> = grid.tiles().map(|t| (t, Raster::new(1920, 1080, [1, 2, 3]))).collect();
        let out = stitch(&grid, &tiles, StitchMode::Contiguous).unwrap();
        assert_eq!((out.width(), out.height()), (7680, 2160));
    }

    #[test]
    fn single_tile_is_identity() {
        let mut cfg = WallConfig::reference_wall();
        cfg.cols = 1;
        cfg.rows = 1;
        cfg.tile_px = PxSize { w: 64, h: 48 };
        let grid = build_wall(&cfg).unwrap();
        let img = Pattern::Unique.render(64, 48, 0);
        let out = stitch(&grid, &BTreeMap::from([(TileId::new(0, 0), img.clone())]), StitchMode::Contiguous).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn split_then_stitch_round_trips_and_swaps_are_caught() {
        let mut cfg = WallConfig::reference_wall();
        cfg.tile_px = PxSize { w: 40, h: 30 };
        let grid = build_wall(&cfg).unwrap();
        let wall = Pattern::Unique.render(160, 60, 0);
        let mut tiles = tiles_of(&grid, &wall);
        assert_eq!(stitch(&grid, &tiles, StitchMode::Contiguous).unwrap(), wall);
        let a = tiles[&TileId::new(1, 0)].clone();
        let b = tiles[&TileId::new(2, 0)].clone();
        tiles.insert(TileId::new(1, 0), b);
        tiles.insert(TileId::new(2, 0), a);
        assert_ne!(stitch(&grid, &tiles, StitchMode::Contiguous).unwrap(), wall);
    }

    #[test]
    fn missing_tiles_are_listed() {
        let grid = build_wall(&WallConfig::reference_wall()).unwrap();
        let mut tiles: BTreeMap<_, _> = grid.tiles().map(|t| (t, Raster::new(1920, 1080, [0; 3]))).collect();
        tiles.remove(&TileId::new(3, 1));
        tiles.remove(&TileId::new(0, 0));
        match stitch(&grid, &tiles, StitchMode::Contiguous) {
            Err(SimError::MissingTiles(m)) => assert_eq!(m, vec![TileId::new(0, 0), TileId::new(3, 1)]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mullions_are_gray() {
        let grid = build_wall(&WallConfig::reference_wall()).unwrap();
        let tiles: BTreeMap<_, _> = grid.tiles().map(|t| (t, Raster::new(1920, 1080, [0; 3]))).collect();
        let out = stitch(&grid, &tiles, StitchMode::Mullions).unwrap();
        // 5.5 mm at ~0.634 mm/px is ~8.7 px per mullion, rounded cumulatively
        assert_eq!(out.width(), 7680 + 26);
        assert_eq!(out.get(1920, 10), MULLION_GRAY);
        assert_eq!(out.get(1919, 10), [0; 3]);
        assert_eq!(out.get(1929, 10), [0; 3]);
    }
}
