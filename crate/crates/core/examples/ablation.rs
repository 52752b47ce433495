//! Trains the full model and each single-switch ablation with the same seed
//! and compares held-out projections.
//!
//! ```text
//! cargo run --release --example ablation -- [iterations] [scene]
//! ```
//!
//! `scene` is `branching-y` (default) or `fast-fill-y`, the latter being the
//! interesting case for the temporal perturbation.

use dsa_field::geometry::ScanGeometry;
use dsa_field::metrics::MetricReport;
use dsa_field::phantom::{generate_dataset, PhantomScene};
use dsa_field::renderer::QuadratureConfig;
use dsa_field::trainer::{evaluate_views, train, Ablation, TrainConfig};

fn main() -> dsa_field::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(1500);
    let scene_name = args.next().unwrap_or_else(|| "branching-y".into());
    let scene = PhantomScene::builtin(&scene_name)
        .ok_or_else(|| dsa_field::Error::InvalidArgument(format!("unknown scene {scene_name}")))?;

    let geometry = ScanGeometry::desk();
    let frames: Vec<usize> = (1..=geometry.num_frames_total).collect();
    let (train_set, test_set) = generate_dataset(&scene, &geometry, &frames, 0.0, 0, &scene_name)?.split_views(30)?;
    // every third held-out view keeps evaluation short
    let test_set = test_set.subset(&(0..test_set.len()).step_by(3).collect::<Vec<_>>())?;
    let quad = QuadratureConfig { samples_per_ray: 128, jitter: false };

    let full = Ablation::default();
    let variants = [
        ("full model", full),
        ("naive S + D", Ablation { use_vessel_prob: false, ..full }),
        ("no progressive levels", Ablation { use_progressive: false, ..full }),
        ("no temporal perturbation", Ablation { use_temporal_perturb: false, ..full }),
        ("no sparsity penalty", Ablation { use_lreg: false, ..full }),
    ];
    let mut report = MetricReport::new(&["psnr_db", "ssim", "final_l1"]);
    for (name, ablation) in variants {
        let cfg = TrainConfig { iterations, ablation, workers: 1, ..TrainConfig::desk() };
        let out = train(train_set.clone(), &cfg, None, |_| {})?;
        let (_, r) = evaluate_views(&out.checkpoint.fields, &test_set, &quad, None)?;
        let tail = &out.history[out.history.len().saturating_sub(100)..];
        let l1 = tail.iter().map(|h| h.l1).sum::<f64>() / tail.len() as f64;
        let (p, _) = r.mean_std("psnr_db").unwrap_or_default();
        let (s, _) = r.mean_std("ssim").unwrap_or_default();
        println!("{name:<26} PSNR {p:6.2} dB  SSIM {s:.4}");
        report.push(name, vec![p, s, l1]);
    }
    println!("\n{}", report.to_table());
    Ok(())
}
