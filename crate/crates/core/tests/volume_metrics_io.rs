mod common;

use common::{lively, small_dataset};
use dsa_field::dataset_io::{load_dataset, read_raw, save_dataset, write_raw, Image};
use dsa_field::geometry::{Aabb, Vec3};
use dsa_field::metrics::{chamfer_points, hausdorff_points, psnr, ssim};
use dsa_field::reconstructor::{
    average_volume, extract_volume, load_volume, marching_cubes, save_volume, Lattice, VolumeImage, VolumeKind,
};
use dsa_field::Error;
use nalgebra::{Rotation3, Unit};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Map;

fn cloud(seed: u64, n: usize, offset: f64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| std::array::from_fn(|k| rng.random_range(-1.0..1.0) + if k == 0 { offset } else { 0.0 })).collect()
}

fn image(seed: u64, cols: usize, rows: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..cols * rows)
        .map(|i| ((i % cols) as f32 * 0.3).sin() + rng.random_range(0.0..0.2))
        .collect();
    Image::from_vec(cols, rows, data).unwrap()
}

/// Samples an ellipsoid's implicit function `1 - |A x|` on a lattice.
fn ellipsoid(n: usize, axes: [f64; 3]) -> VolumeImage {
    let lat = Lattice::covering(&Aabb::cube(2.0), n).unwrap();
    let values = (0..lat.len())
        .map(|i| {
            let c = lat.center_of(i);
            let q: f64 = (0..3).map(|k| (c[k] / axes[k]).powi(2)).sum();
            (1.0 - q.sqrt()) as f32
        })
        .collect();
    VolumeImage::new(lat, values, "ellipsoid", None)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn distances_are_symmetric_and_ordered(sa in 0u64..1000, sb in 0u64..1000, off in 0.0f64..2.0) {
        let (a, b) = (cloud(sa, 300, 0.0), cloud(sb, 200, off));
        let (cab, cba) = (chamfer_points(&a, &b).unwrap(), chamfer_points(&b, &a).unwrap());
        let (hab, hba) = (hausdorff_points(&a, &b).unwrap(), hausdorff_points(&b, &a).unwrap());
        prop_assert!((cab - cba).abs() < 1e-12);
        prop_assert_eq!(hab, hba);
        prop_assert!(cab >= 0.0 && cab <= hab);
        prop_assert_eq!(chamfer_points(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn distances_are_rigid_invariant(
        seed in 0u64..1000,
        axis in proptest::array::uniform3(-1.0f64..1.0),
        angle in -3.1f64..3.1,
        shift in proptest::array::uniform3(-50.0f64..50.0),
    ) {
        let Some(axis) = Unit::try_new(Vec3::from(axis), 1e-3) else { return Ok(()) };
        let r = Rotation3::from_axis_angle(&axis, angle);
        let moved = |pts: &[[f64; 3]]| -> Vec<[f64; 3]> {
            pts.iter().map(|p| (r * Vec3::from(*p) + Vec3::from(shift)).into()).collect()
        };
        let (a, b) = (cloud(seed, 200, 0.0), cloud(seed + 1, 200, 0.3));
        let before = chamfer_points(&a, &b).unwrap();
        let after = chamfer_points(&moved(&a), &moved(&b)).unwrap();
        prop_assert!((before - after).abs() < 1e-9);
        let hb = hausdorff_points(&a, &b).unwrap();
        let ha = hausdorff_points(&moved(&a), &moved(&b)).unwrap();
        prop_assert!((hb - ha).abs() < 1e-9);
    }

    #[test]
    fn psnr_falls_as_noise_grows(seed in 0u64..1000, small in 0.001f32..0.05, factor in 1.5f32..10.0) {
        let target = image(seed, 24, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let dir: Vec<f32> = (0..target.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let noisy = |s: f32| Image::from_vec(24, 20, target.data.iter().zip(&dir).map(|(a, d)| a + s * d).collect()).unwrap();
        let lo = psnr(&noisy(small * factor), &target, 1.2).unwrap();
        let hi = psnr(&noisy(small), &target, 1.2).unwrap();
        prop_assert!(hi > lo);
    }

    #[test]
    fn ssim_is_symmetric_and_maximal_at_identity(sa in 0u64..1000, sb in 0u64..1000) {
        let (a, b) = (image(sa, 32, 24), image(sb, 32, 24));
        prop_assert!((ssim(&a, &a, 1.2).unwrap() - 1.0).abs() < 1e-12);
        let (ab, ba) = (ssim(&a, &b, 1.2).unwrap(), ssim(&b, &a, 1.2).unwrap());
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
    }

    #[test]
    fn raw_payloads_round_trip_bitwise(bits in proptest::collection::vec(any::<u32>(), 1..200)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("payload.f32");
        let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
        write_raw(&path, &[1, data.len()], Map::new(), &data).unwrap();
        let (shape, _, back) = read_raw(&path).unwrap();
        prop_assert_eq!(shape, vec![1, data.len()]);
        prop_assert!(back.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn averaging_ignores_timestamp_order(seed in 0u64..100, ts in proptest::collection::vec(0.0f64..1.0, 1..6)) {
        let f = lively::<f32>(seed, false);
        let lat = Lattice::covering(&Aabb::cube(1.0), 6).unwrap();
        let aabb = Aabb::cube(1.0);
        let a = average_volume(&f, &lat, &aabb, &ts, VolumeKind::MuC).unwrap();
        let mut shuffled = ts.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let b = average_volume(&f, &lat, &aabb, &shuffled, VolumeKind::MuC).unwrap();
        prop_assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

/// Every marching-cubes vertex sits within one voxel of the analytic surface.
#[test]
fn mesh_vertices_hug_the_surface() {
    let axes = [0.7, 0.5, 0.35];
    let v = ellipsoid(48, axes);
    let mesh = marching_cubes(&v, 0.0);
    assert!(mesh.is_closed());
    assert_eq!(mesh.euler_characteristic(), 2);
    let h = v.lattice.voxel_size;
    for p in &mesh.vertices {
        // distance to the ellipsoid is bounded by the radial gap scaled by the largest axis
        let q: f64 = (0..3).map(|k| (p[k] / axes[k]).powi(2)).sum::<f64>().sqrt();
        assert!((q - 1.0).abs() * 0.7 <= h, "{p:?}");
    }
}

/// Extraction is a pure function of the parameters and lattice.
#[test]
fn extraction_is_deterministic() {
    let f = lively::<f32>(9, true);
    let lat = Lattice::covering(&Aabb::cube(220.0), 12).unwrap();
    let aabb = Aabb::cube(220.0);
    for kind in VolumeKind::ALL {
        let t = kind.is_time_dependent().then_some(0.4);
        let a = extract_volume(&f, &lat, &aabb, kind, t).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap()
            .install(|| extract_volume(&f, &lat, &aabb, kind, t).unwrap());
        assert_eq!(a.values, b.values, "{}", kind.name());
    }
    assert!(matches!(extract_volume(&f, &lat, &aabb, VolumeKind::MuC, None), Err(Error::InvalidArgument(_))));
}

#[test]
fn volumes_and_datasets_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let v = ellipsoid(10, [0.5, 0.5, 0.5]);
    save_volume(&dir.path().join("v.f32"), &v).unwrap();
    assert_eq!(load_volume(&dir.path().join("v.f32")).unwrap(), v);

    let ds = small_dataset(&[2, 7]);
    save_dataset(&ds, &dir.path().join("ds")).unwrap();
    assert_eq!(load_dataset(&dir.path().join("ds")).unwrap(), ds);
}

#[test]
fn truncated_and_missing_payloads_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.f32");
    write_raw(&path, &[4], Map::new(), &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(read_raw(&path), Err(Error::Data(_))));
    let err = read_raw(&dir.path().join("absent.f32")).unwrap_err();
    assert!(err.to_string().contains("absent.f32"), "{err}");
}
