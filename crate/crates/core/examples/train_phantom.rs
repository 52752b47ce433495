//! Trains on the branching-Y phantom and scores held-out views and the mesh.
//!
//! ```text
//! cargo run --release --example train_phantom -- [iterations] [views] [seed]
//! ```
//!
//! Defaults to a short 2000-iteration run; pass 20000 for the full desk
//! benchmark.

use std::time::Instant;

use dsa_field::geometry::ScanGeometry;
use dsa_field::metrics::chamfer_points;
use dsa_field::phantom::{generate_dataset, PhantomScene};
use dsa_field::reconstructor::{average_volume, default_iso_level, marching_cubes, Lattice, VolumeKind};
use dsa_field::renderer::QuadratureConfig;
use dsa_field::trainer::{evaluate_views, train, TrainConfig};

fn main() -> dsa_field::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let iterations = args.first().copied().unwrap_or(2000);
    let views = args.get(1).copied().unwrap_or(30) as usize;
    let seed = args.get(2).copied().unwrap_or(0);

    let scene = PhantomScene::branching_y();
    let geometry = ScanGeometry::desk();
    let frames: Vec<usize> = (1..=geometry.num_frames_total).collect();
    let all = generate_dataset(&scene, &geometry, &frames, 0.0, seed, "branching-y")?;
    let (train_set, test_set) = all.split_views(views)?;
    println!("{} training views, {} held out", train_set.len(), test_set.len());

    let mut config = TrainConfig::desk();
    config.iterations = iterations;
    config.seed = seed;
    let start = Instant::now();
    let outcome = train(train_set.clone(), &config, None, |r| {
        if (r.iteration + 1) % 500 == 0 {
            println!(
                "iter {:6}  l1 {:.3e}  lreg {:.3}  levels {:2}  {:.1} ms/iter",
                r.iteration + 1,
                r.l1,
                r.lreg,
                r.active_levels,
                start.elapsed().as_secs_f64() * 1e3 / (r.iteration + 1) as f64
            );
        }
    })?;
    let fields = &outcome.checkpoint.fields;

    let t0 = Instant::now();
    let quad = QuadratureConfig { samples_per_ray: 256, jitter: false };
    let (_, report) = evaluate_views(fields, &test_set, &quad, None)?;
    let (psnr, psnr_std) = report.mean_std("psnr_db").unwrap();
    let (ssim, _) = report.mean_std("ssim").unwrap();
    println!("held-out PSNR {psnr:.2} ± {psnr_std:.2} dB, SSIM {ssim:.4} ({:.1} s)", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let lattice = Lattice::covering(&geometry.aabb, 128)?;
    let mean = average_volume(fields, &lattice, &geometry.aabb, &train_set.manifest.timestamps(), VolumeKind::MuC)?;
    let iso = default_iso_level(&mean);
    let (lo, hi) = mean.min_max();
    println!("mean volume range [{lo:e}, {hi:e}], iso {iso:e}");
    let mesh = marching_cubes(&mean, iso);
    let samples = dsa_field::metrics::sample_mesh_surface(&mesh, 100_000, seed)?;
    let truth: Vec<[f64; 3]> = scene.sample_surface(100_000, seed).iter().map(|p| [p.x, p.y, p.z]).collect();
    let cd = chamfer_points(&samples, &truth)?;
    println!(
        "mesh: {} triangles at iso {iso:.4}; chamfer {cd:.3} mm (voxel {:.3} mm) ({:.1} s)",
        mesh.triangles.len(),
        lattice.voxel_size,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
