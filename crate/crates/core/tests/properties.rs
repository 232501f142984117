use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tilewall::geometry::{build_wall, GeometryMode, MmPoint, Rect, TileGrid, TileId, WallConfig};
use tilewall::protocol::{decode, encode, Message, HEADER_LEN, MAGIC};
use tilewall::pyramid::{build_pyramid, Pyramid, RegionRequest};
use tilewall::raster::Raster;
use tilewall::scene::{
    load_environment, placement_bounds, save_environment, ContentKind, ContentObject, EnvironmentDoc, NoLiveContent,
    Placement, PlacementId, Scene, ZDirection,
};

fn reference() -> TileGrid {
    build_wall(&WallConfig::reference_wall()).unwrap()
}

fn accurate() -> TileGrid {
    let mut cfg = WallConfig::reference_wall();
    cfg.mode = GeometryMode::PhysicallyAccurate;
    build_wall(&cfg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn viewports_partition_the_visible_rect(
        x in -600i64..8000, y in -600i64..2500, w in 1i64..4000, h in 1i64..2000
    ) {
        let grid = reference();
        let rect = Rect::new(x, y, w, h);
        let vps = grid.wall_to_tile_viewports(&rect);
        let canvas = grid.canvas_rect();
        let expected = rect.intersect(&canvas).map_or(0, |r| r.area());
        prop_assert_eq!(vps.iter().map(|v| v.dest.area()).sum::<i64>(), expected);
        for (i, a) in vps.iter().enumerate() {
            let tile = grid.tile_rect(a.tile);
            prop_assert!(Rect::new(0, 0, tile.w, tile.h).contains_rect(&a.dest));
            prop_assert_eq!(a.dest.translate(tile.x - x, tile.y - y), a.src);
            for b in &vps[i + 1..] {
                prop_assert!(a.src.intersect(&b.src).is_none());
            }
        }
    }

    #[test]
    fn pixel_to_wallspace_round_trips(col in 0u32..4, row in 0u32..2, px in 0u32..1920, py in 0u32..1080) {
        let grid = accurate();
        let tile = TileId::new(col, row);
        let mm = grid.wallspace_of_pixel(tile, (px, py)).unwrap();
        prop_assert_eq!(grid.pixel_of_wallspace(mm).unwrap(), Some((tile, (px, py))));
    }

    #[test]
    fn gap_points_map_to_no_pixel(row in 0u32..2, t in 0.01f64..0.99, v in 0.0f64..1.0) {
        let grid = accurate();
        let (gap, _) = grid.tile_gap_mm();
        let left = grid.tile_origin_mm(TileId::new(0, row));
        let right = grid.tile_origin_mm(TileId::new(1, row));
        let x = right.x - gap * (1.0 - t);
        let y = left.y + v * grid.config().visible_mm.h * 0.99;
        prop_assert_eq!(grid.pixel_of_wallspace(MmPoint { x, y }).unwrap(), None);
    }

    #[test]
    fn bounds_enclose_the_rotated_corners(
        w in 1u32..3000, h in 1u32..3000, x in -2000.0f64..8000.0, y in -2000.0f64..3000.0,
        scale in 0.05f64..5.0, rot in -720.0f64..720.0
    ) {
        let c = ContentObject::new(tilewall::scene::ContentId(1), ContentKind::TestPattern, w, h, "bars");
        let p = Placement { id: PlacementId(1), content: c.id, x, y, scale, rotation_deg: rot, z: 0 };
        let (hw, hh) = (w as f64 * scale / 2.0, h as f64 * scale / 2.0);
        let (cx, cy) = (x + hw, y + hh);
        let t = rot.to_radians();
        let corners: Vec<(f64, f64)> = [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
            .iter()
            .map(|&(u, v)| (cx + u * t.cos() + v * t.sin(), cy - u * t.sin() + v * t.cos()))
            .collect();
        let b = placement_bounds(&p, &c);
        let tol = 1e-6 * (1.0 + hw + hh);
        let min_x = corners.iter().map(|c| c.0).fold(f64::MAX, f64::min);
        let max_x = corners.iter().map(|c| c.0).fold(f64::MIN, f64::max);
        let min_y = corners.iter().map(|c| c.1).fold(f64::MAX, f64::min);
        let max_y = corners.iter().map(|c| c.1).fold(f64::MIN, f64::max);
        prop_assert!((b.x0 - min_x).abs() < tol && (b.x1 - max_x).abs() < tol);
        prop_assert!((b.y0 - min_y).abs() < tol && (b.y1 - max_y).abs() < tol);
    }

    #[test]
    fn quarter_turn_samples_match_hand_oracle(
        w in 1u32..40, k in 0u32..10, x in 0i64..7600, y in 0i64..2100
    ) {
        // same parity keeps the rotated box on whole pixels
        let h = w + 2 * k;
        let mut scene = Scene::new(reference());
        let c = scene.register_content(ContentKind::TestPattern, w, h, "bars", None).unwrap();
        let p = scene.place(c, x as f64, y as f64, 1.0, 90.0).unwrap();
        let grid = reference();
        // rotated box: h wide, w tall, same centre
        let x0 = x + (w as i64 - h as i64) / 2;
        let y0 = y + (h as i64 - w as i64) / 2;
        let mut seen = 0;
        for region in scene.visible_regions(p).unwrap() {
            let origin = grid.tile_rect(region.tile);
            for (tx, ty, u, v) in region.pixels() {
                let (cx, cy) = (tx + origin.x, ty + origin.y);
                prop_assert_eq!((u as i64, v as i64), (w as i64 - 1 - (cy - y0), cx - x0));
                seen += 1;
            }
        }
        let visible = Rect::new(x0, y0, h as i64, w as i64).intersect(&grid.canvas_rect()).map_or(0, |r| r.area());
        prop_assert_eq!(seen, visible);
    }

    #[test]
    fn z_orders_stay_distinct(ops in proptest::collection::vec((0usize..6, any::<bool>()), 0..40)) {
        let mut scene = Scene::new(reference());
        let c = scene.register_content(ContentKind::TestPattern, 100, 100, "checker", None).unwrap();
        let ids: Vec<PlacementId> = (0..6).map(|i| scene.place(c, i as f64 * 50.0, 0.0, 1.0, 0.0).unwrap()).collect();
        for (i, raise) in ops {
            let dir = if raise { ZDirection::Raise } else { ZDirection::Lower };
            scene.set_z(ids[i], dir).unwrap();
            let mut z: Vec<i64> = scene.placements().iter().map(|p| p.z).collect();
            z.sort_unstable();
            z.dedup();
            prop_assert_eq!(z.len(), ids.len());
        }
    }

    #[test]
    fn environments_survive_save_and_load(
        items in proptest::collection::vec((1u32..4000, 1u32..4000, -1000.0f64..8000.0, -1000.0f64..3000.0, 0.1f64..4.0, 0.0f64..360.0), 0..8)
    ) {
        let grid = reference();
        let mut scene = Scene::new(grid.clone());
        for (w, h, x, y, s, r) in &items {
            let c = scene.register_content(ContentKind::TestPattern, *w, *h, "gradient", None).unwrap();
            scene.place(c, *x, *y, *s, *r).unwrap();
        }
        let doc = save_environment(&scene);
        let parsed = EnvironmentDoc::from_json(&doc.to_json()).unwrap();
        prop_assert_eq!(&parsed, &doc);
        let loaded = load_environment(&parsed, &NoLiveContent, &grid).unwrap();
        prop_assert!(loaded.warnings.is_empty());
        prop_assert_eq!(loaded.scene.placements(), scene.placements());
        prop_assert_eq!(save_environment(&loaded.scene), doc);
    }

    #[test]
    fn decode_is_total_and_exact(
        header in proptest::collection::vec(any::<u8>(), HEADER_LEN - 4..HEADER_LEN),
        body in proptest::collection::vec(any::<u8>(), 0..64),
        fix_len in any::<bool>()
    ) {
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&header);
        if fix_len && bytes.len() == HEADER_LEN {
            bytes[4] = 1;
            let n = body.len() as u32;
            bytes[HEADER_LEN - 4..].copy_from_slice(&n.to_le_bytes());
        }
        bytes.extend_from_slice(&body);
        if let Ok(env) = decode(&bytes) {
            prop_assert_eq!(encode(&env).unwrap(), bytes);
            // typed message or typed error, never a panic
            let _ = Message::from_envelope(&env);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn coarsest_level_tracks_single_pass_average(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src = Raster::from_fn(512, 512, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
        let dir = tempfile::tempdir().unwrap();
        let index = build_pyramid(&src, 64, dir.path()).unwrap();
        prop_assert_eq!(index.level_count(), 4);
        let coarse = Pyramid::open(dir.path())
            .unwrap()
            .read_region(RegionRequest { level: 3, rect: Rect::new(0, 0, 64, 64) })
            .unwrap();
        for by in 0..64 {
            for bx in 0..64 {
                let mut sum = [0u32; 3];
                for y in by * 8..by * 8 + 8 {
                    for x in bx * 8..bx * 8 + 8 {
                        let p = src.get(x, y);
                        for c in 0..3 {
                            sum[c] += p[c] as u32;
                        }
                    }
                }
                let got = coarse.get(bx, by);
                for c in 0..3 {
                    let oracle = sum[c] as f64 / 64.0;
                    prop_assert!((got[c] as f64 - oracle).abs() <= 1.0, "({bx},{by}) {} vs {oracle}", got[c]);
                }
            }
        }
    }
}
