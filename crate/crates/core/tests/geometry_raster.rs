mod common;

use bevfuse::geometry::{pose_difference, BevGrid, ImagePoint, Pose, Vec3};
use bevfuse::raster::{rasterize, PointCloud, RasterConfig};
use common::{oracle_raster, point_in_frustum, random_calibration, random_cloud, rel_err};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cal = random_calibration(&mut rng);
        for _ in 0..16 {
            let x = point_in_frustum(&mut rng, &cal);
            let p = cal.project(&x).unwrap();
            let back = cal.back_project(&p).unwrap();
            prop_assert!((back - x).norm() / x.norm().max(1.0) < 1e-9);
        }
    }

    #[test]
    fn rays_are_unit_and_reproject(seed in any::<u64>(), u in 0.0f64..200.0, v in 0.0f64..160.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cal = random_calibration(&mut rng);
        let ray = cal.pixel_to_ray(u, v).unwrap();
        prop_assert!((ray.norm() - 1.0).abs() < 1e-12);
        let p = cal.project(&(cal.center + ray * 37.0)).unwrap();
        prop_assert!((p.u - u).abs() < 1e-8 && (p.v - v).abs() < 1e-8);
    }

    #[test]
    fn grid_round_trip(r in 0usize..50, c in 0usize..70, mpc in 0.5f64..10.0) {
        let grid = BevGrid::centered(50, 70, mpc);
        let (x, y) = grid.cell_center_to_world(r, c).unwrap();
        prop_assert_eq!(grid.world_to_cell(x, y).unwrap(), (r, c));
    }

    #[test]
    fn pose_difference_composes(
        a in (-50.0f64..50.0, -50.0f64..50.0, -3.0f64..3.0),
        b in (-50.0f64..50.0, -50.0f64..50.0, -3.0f64..3.0),
        p in (-100.0f64..100.0, -100.0f64..100.0, -5.0f64..5.0),
    ) {
        let pa = Pose::planar(a.0, a.1, a.2, 0.0);
        let pb = Pose::planar(b.0, b.1, b.2, 1.0);
        // A point in b's body frame, expressed in a's body frame, is the
        // same world point.
        let body_b = Vec3::new(p.0, p.1, p.2);
        let in_a = pose_difference(&pa, &pb).apply(&body_b);
        prop_assert!((pa.to_world(&in_a) - pb.to_world(&body_b)).norm() < 1e-9);
    }

    #[test]
    fn raster_matches_oracle(seed in any::<u64>(), n in 0usize..600, cell in 0.3f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = random_cloud(&mut rng, n, 25.0);
        let cfg = RasterConfig::centered(17, 23, cell);
        let img = rasterize(&cloud, &cfg).unwrap();
        let oracle = oracle_raster(&cloud, &cfg);
        prop_assert_eq!(img.occupancy, oracle.occupancy);
        prop_assert_eq!(img.dropped, oracle.dropped);
        prop_assert!(img.cells.iter().zip(&oracle.cells).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn raster_permutation_invariant(seed in any::<u64>(), n in 1usize..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = random_cloud(&mut rng, n, 12.0);
        let mut shuffled = cloud.clone();
        shuffled.points.shuffle(&mut rng);
        let cfg = RasterConfig::centered(8, 8, 3.0);
        prop_assert_eq!(rasterize(&cloud, &cfg).unwrap(), rasterize(&shuffled, &cfg).unwrap());
    }

    #[test]
    fn raster_translation_equivariant(seed in any::<u64>(), n in 1usize..400, di in -3i32..=3, dj in -3i32..=3) {
        // Dyadic coordinates and cell size keep every shift exact.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = random_cloud(&mut rng, n, 8.0);
        let snap = |v: f64| (v * 64.0).round() / 64.0;
        let points: Vec<[f64; 3]> = cloud.points.iter().map(|p| [snap(p[0]), snap(p[1]), p[2]]).collect();
        let cfg = RasterConfig::centered(16, 16, 1.0);
        let base = rasterize(&PointCloud::new(points.clone(), "a", 0.0), &cfg).unwrap();
        let moved: Vec<[f64; 3]> = points.iter().map(|p| [p[0] + di as f64, p[1] + dj as f64, p[2]]).collect();
        let shifted = rasterize(&PointCloud::new(moved, "a", 0.0), &cfg).unwrap();
        for i in 0..16i32 {
            for j in 0..16i32 {
                let (si, sj) = (i + di, j + dj);
                if !(0..16).contains(&si) || !(0..16).contains(&sj) {
                    continue;
                }
                prop_assert_eq!(base.cell(i as usize, j as usize), shifted.cell(si as usize, sj as usize));
                prop_assert_eq!(base.occupied(i as usize, j as usize), shifted.occupied(si as usize, sj as usize));
            }
        }
    }
}

#[test]
fn back_project_with_zero_depth_returns_center() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cal = random_calibration(&mut rng);
    let c = cal
        .back_project(&ImagePoint {
            u: 10.0,
            v: 20.0,
            depth: 0.0,
        })
        .unwrap();
    assert!(rel_err(c.norm(), cal.center.norm()) < 1e-12);
}
