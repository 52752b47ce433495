//! Checks the hand-written backward pass against central finite differences.
//!
//! Builds small double-precision fields, a batch of rays over a tiny
//! phantom dataset and compares analytic and numerical gradients of the
//! full loss (rendering L1 plus probability sparsity) for every parameter
//! block.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use dsa_field::fields::{CompositionMode, FieldGrads, FieldSet, FieldSetConfig, ParamBlock};
use dsa_field::geometry::ScanGeometry;
use dsa_field::hash_encoding::HashGridConfig;
use dsa_field::phantom::{generate_dataset, PhantomScene};
use dsa_field::renderer::QuadratureConfig;
use dsa_field::trainer::{compute_loss, Batch, RayTask, Worker};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dsa_field::Result<()> {
    let grid = |dims, base| HashGridConfig { dims, levels: 4, feat_dim: 2, log2_table_size: 9, base_res: base, growth: 1.6 };
    let config = FieldSetConfig {
        spatial_grid: grid(3, 3),
        temporal_grid: grid(4, 2),
        hidden_dim: 8,
        num_layers: 3,
        decoder_bias: true,
        mode: CompositionMode::Guided,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut fields = FieldSet::<f64>::new(config, &mut rng)?;
    // push parameters away from their tiny initial values
    for b in ParamBlock::ALL {
        for v in fields.block_mut(b) {
            *v += rng.random_range(-0.4..0.4);
        }
    }
    fields.bump_version();

    let geometry = ScanGeometry { det_cols: 24, det_rows: 24, pitch_u_mm: 14.0, pitch_v_mm: 14.0, ..ScanGeometry::desk() };
    let ds = generate_dataset(&PhantomScene::branching_y(), &geometry, &[10, 30, 50], 0.0, 0, "branching-y")?;
    let rays = ds
        .manifest
        .frames
        .iter()
        .zip(&ds.images)
        .flat_map(|(f, img)| {
            let pose = geometry.pose_for_frame(f.frame_index).unwrap();
            (0..8).map(move |k| (pose, img.get(6 + k, 12), k))
        })
        .map(|(pose, target, k)| RayTask {
            ray: geometry.ray_for_pixel(&pose, 6.0 + k as f64, 12.0),
            t: pose.t_norm,
            target,
            jitter_seed: k as u64,
        })
        .collect();
    let batch = Batch { rays, reg_points: (0..32).map(|_| [rng.random(), rng.random(), rng.random()]).collect() };
    let quad = QuadratureConfig { samples_per_ray: 32, jitter: true };
    let aabb = geometry.aabb;

    let loss = |f: &FieldSet<f64>, grads: &mut FieldGrads<f64>| {
        let mut w = vec![Worker::new(f, &quad)];
        compute_loss(f, &aabb, &batch, &quad, 0.01, grads, &mut w, false).unwrap().total
    };
    let mut grads = FieldGrads::for_fields(&fields);
    println!("loss {:.6}", loss(&fields, &mut grads));

    for b in ParamBlock::ALL {
        let live: Vec<usize> = (0..grads.block(b).len()).filter(|&i| grads.block(b)[i] != 0.0).collect();
        // tiny gradients sit at the finite-difference roundoff, so the
        // denominator is floored at a fraction of the block's largest gradient
        let floor = 1e-3 * live.iter().map(|&i| grads.block(b)[i].abs()).fold(0.0, f64::max);
        let mut worst = 0.0f64;
        for _ in 0..8 {
            let i = live[rng.random_range(0..live.len())];
            let orig = fields.block(b)[i];
            let h = 1e-6;
            let mut at = |v| {
                fields.block_mut(b)[i] = v;
                fields.bump_version();
                loss(&fields, &mut FieldGrads::for_fields(&fields))
            };
            let fd = (at(orig + h) - at(orig - h)) / (2.0 * h);
            at(orig);
            let an = grads.block(b)[i];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(floor));
        }
        println!("{:>12}: {:5} of {:6} parameters touched, worst relative error {worst:.1e}", b.name(), live.len(), grads.block(b).len());
    }
    Ok(())
}
