use dsa_field::geometry::{ScanGeometry, Vec3};
use dsa_field::phantom::{chord_length, PhantomScene, Shape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(v: [f64; 3]) -> Option<Vec3> {
    let v = Vec3::from(v);
    (v.norm() > 1e-3).then(|| v.normalize())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn poses_are_monotone(frames in 2usize..200, sweep in 1.0f64..360.0) {
        let g = ScanGeometry { num_frames_total: frames, angle_range_deg: sweep, ..ScanGeometry::desk() };
        let poses: Vec<_> = (1..=frames).map(|i| g.pose_for_frame(i).unwrap()).collect();
        for w in poses.windows(2) {
            prop_assert!(w[1].angle_rad > w[0].angle_rad);
            prop_assert!(w[1].t_norm > w[0].t_norm);
        }
        prop_assert_eq!(poses[0].t_norm, 0.0);
        prop_assert_eq!(poses[frames - 1].t_norm, 1.0);
    }

    #[test]
    fn ray_interval_stays_inside_the_box(
        frame in 1usize..=60,
        u in 0.0f64..127.0,
        v in 0.0f64..127.0,
        fracs in proptest::collection::vec(0.001f64..0.999, 8),
    ) {
        let g = ScanGeometry::desk();
        let pose = g.pose_for_frame(frame).unwrap();
        let ray = g.ray_for_pixel(&pose, u, v);
        if let Some(iv) = ray.bounds {
            prop_assert!(iv.near < iv.far);
            for f in fracs {
                let p = ray.at(iv.near + f * (iv.far - iv.near));
                prop_assert!(g.aabb.contains(&p));
            }
        }
    }

    #[test]
    fn projections_are_rotation_equivariant(
        frame in 1usize..=60,
        u in 0.0f64..127.0,
        v in 0.0f64..127.0,
        theta_deg in -180.0f64..180.0,
        t in 0.0f64..1.0,
    ) {
        let scene = PhantomScene::branching_y();
        let g = ScanGeometry::desk();
        let rotated_g = ScanGeometry { angle_start_deg: g.angle_start_deg + theta_deg, ..g.clone() };
        let rotated_scene = scene.rotated_z(theta_deg.to_radians());
        let a = g.ray_for_pixel(&g.pose_for_frame(frame).unwrap(), u, v);
        let b = rotated_g.ray_for_pixel(&rotated_g.pose_for_frame(frame).unwrap(), u, v);
        let pa = scene.project_analytic(&a.origin, &a.direction, t);
        let pb = rotated_scene.project_analytic(&b.origin, &b.direction, t);
        prop_assert!((pa - pb).abs() <= 1e-9 * (1.0 + pa.abs()), "{} vs {}", pa, pb);
    }

    #[test]
    fn subtraction_identity(
        o in proptest::array::uniform3(-300.0f64..300.0),
        d in proptest::array::uniform3(-1.0f64..1.0),
        t in 0.0f64..1.0,
    ) {
        let Some(d) = unit(d) else { return Ok(()) };
        let scene = PhantomScene::branching_y();
        let o = Vec3::from(o);
        let mf = scene.simulate_mask_fill(&o, &d, t);
        let exact = scene.project_analytic(&o, &d, t);
        prop_assert!((mf.dsa - exact).abs() <= 1e-10 * (1.0 + exact.abs()));
    }

    #[test]
    fn projections_fill_monotonically(
        o in proptest::array::uniform3(-300.0f64..300.0),
        d in proptest::array::uniform3(-1.0f64..1.0),
        ts in proptest::collection::vec(0.0f64..1.0, 2..12),
    ) {
        let Some(d) = unit(d) else { return Ok(()) };
        let scene = PhantomScene::branching_y();
        let o = Vec3::from(o);
        let mut ts = ts;
        ts.sort_by(f64::total_cmp);
        let values: Vec<f64> = ts.iter().map(|&t| scene.project_analytic(&o, &d, t)).collect();
        for w in values.windows(2) {
            prop_assert!(w[1] >= w[0]);
        }
    }
}

/// Chord lengths against Monte-Carlo membership integration along the ray.
#[test]
fn capsule_chords_match_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let scene = PhantomScene::branching_y();
    let mut checked = 0;
    while checked < 50 {
        let prim = &scene.primitives[rng.random_range(0..3)];
        let Shape::Capsule { p0, p1, radius } = prim.shape else { unreachable!() };
        let (a, b) = (Vec3::from(p0), Vec3::from(p1));
        let through = a + (b - a) * rng.random::<f64>()
            + Vec3::new(rng.random(), rng.random(), rng.random()) * radius * 0.8;
        let Some(d) = unit([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]) else {
            continue;
        };
        let origin = through - d * 200.0;
        let exact = chord_length(&origin, &d, prim);
        if exact < 1.0 {
            continue;
        }
        let n = 1_000_000;
        let len = 400.0;
        // one jittered sample per stratum keeps the estimator's spread at
        // the stratum width instead of 1/sqrt(n)
        let h = len / n as f64;
        let inside = (0..n)
            .filter(|&i| prim.shape.contains(&(origin + d * ((i as f64 + rng.random::<f64>()) * h))))
            .count();
        let mc = inside as f64 / n as f64 * len;
        assert!((mc - exact).abs() <= 1e-3 * exact, "mc {mc} exact {exact}");
        checked += 1;
    }
}
