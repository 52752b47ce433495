//! Reads volumes out of a trained field set and meshes the averaged
//! contrast volume.
//!
//! With a checkpoint path the fields come from disk; without one a short
//! run on the branching-Y phantom is trained first. The mesh is scored
//! against the analytic vessel surface, next to a mesh of the ground-truth
//! volume on the same lattice.
//!
//! ```text
//! cargo run --release --example extract_mesh -- [checkpoint.f32] [resolution]
//! ```

use std::path::PathBuf;

use dsa_field::dataset_io::load_checkpoint;
use dsa_field::geometry::ScanGeometry;
use dsa_field::metrics::{chamfer_points, hausdorff_points, sample_mesh_surface};
use dsa_field::phantom::{generate_dataset, ground_truth_volume, PhantomScene};
use dsa_field::reconstructor::{
    average_of, average_volume, default_iso_level, extract_volume, marching_cubes, write_ply, Lattice, TriMesh,
    VolumeKind,
};
use dsa_field::trainer::{train, TrainConfig};

fn score(name: &str, mesh: &TriMesh, truth: &[[f64; 3]], voxel: f64) -> dsa_field::Result<()> {
    if mesh.is_empty() {
        println!("{name}: empty mesh");
        return Ok(());
    }
    let pts = sample_mesh_surface(mesh, truth.len(), 1)?;
    println!(
        "{name}: {} triangles, closed {}, CD {:.3} mm, HD {:.3} mm ({:.2} voxels CD)",
        mesh.triangles.len(),
        mesh.is_closed(),
        chamfer_points(&pts, truth)?,
        hausdorff_points(&pts, truth)?,
        chamfer_points(&pts, truth)? / voxel
    );
    Ok(())
}

fn main() -> dsa_field::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt_path = args.next().filter(|a| a != "-").map(PathBuf::from);
    let res: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(96);
    let scene = PhantomScene::branching_y();

    let (fields, geometry, timestamps) = match ckpt_path {
        Some(p) => {
            let c = load_checkpoint(&p)?;
            (c.fields, c.geometry, c.timestamps)
        }
        None => {
            let geometry = ScanGeometry::desk();
            let frames: Vec<usize> = (1..=60).step_by(2).collect();
            let ds = generate_dataset(&scene, &geometry, &frames, 0.0, 0, "branching-y")?;
            let cfg = TrainConfig { iterations: 1500, workers: 1, ..TrainConfig::desk() };
            println!("training {} iterations on {} views ...", cfg.iterations, ds.len());
            let out = train(ds, &cfg, None, |_| {})?;
            (out.checkpoint.fields, out.checkpoint.geometry, out.checkpoint.timestamps)
        }
    };
    let aabb = geometry.aabb;
    let lattice = Lattice::covering(&aabb, res)?;

    for kind in VolumeKind::ALL {
        let t = kind.is_time_dependent().then_some(0.5);
        let v = extract_volume(&fields, &lattice, &aabb, kind, t)?;
        let (lo, hi) = v.min_max();
        println!("{:>17}: range [{lo:.3e}, {hi:.3e}], p99.9 {:.3e}", kind.name(), v.percentile(0.999));
    }

    let mean = average_volume(&fields, &lattice, &aabb, &timestamps, VolumeKind::MuC)?;
    let iso = default_iso_level(&mean);
    let mesh = marching_cubes(&mean, iso);
    let truth: Vec<[f64; 3]> = scene.sample_surface(50_000, 0).iter().map(|p| [p.x, p.y, p.z]).collect();
    println!("iso {iso:.4e} (half the 99.9th percentile of the averaged volume)");
    score("reconstruction", &mesh, &truth, lattice.voxel_size)?;

    let gt_frames: Vec<_> = timestamps.iter().map(|&t| ground_truth_volume(&scene, &lattice, t)).collect();
    let gt = average_of(&gt_frames)?;
    score("ground truth  ", &marching_cubes(&gt, default_iso_level(&gt)), &truth, lattice.voxel_size)?;
    println!("voxelwise MAE vs ground-truth average {:.3e}", mean.mean_abs_diff(&gt)?);

    let out = PathBuf::from("target/example-out/extract_mesh.ply");
    write_ply(&out, &mesh, &[("iso".into(), iso.to_string())])?;
    println!("wrote {}", out.display());
    Ok(())
}
