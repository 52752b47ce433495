//! Times the pieces of one training step at the desk configuration.
//!
//! ```text
//! cargo run --release --example bench_step -- [iterations]
//! ```

use std::time::Instant;

use dsa_field::fields::FieldGrads;
use dsa_field::geometry::ScanGeometry;
use dsa_field::phantom::{generate_dataset, PhantomScene};
use dsa_field::trainer::{compute_loss, TrainConfig, Trainer, Worker};

fn main() -> dsa_field::Result<()> {
    let iterations: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(200);
    let scene = PhantomScene::branching_y();
    let geometry = ScanGeometry::desk();
    let frames: Vec<usize> = (1..=geometry.num_frames_total).collect();
    let all = generate_dataset(&scene, &geometry, &frames, 0.0, 0, "branching-y")?;
    let (train_set, _) = all.split_views(30)?;

    let mut config = TrainConfig::desk();
    config.workers = 1;
    let mut trainer = Trainer::new(train_set, config.clone())?;
    println!("parameters: {}", trainer.fields().param_count());

    let t0 = Instant::now();
    for _ in 0..iterations {
        trainer.step()?;
    }
    let step_ms = t0.elapsed().as_secs_f64() * 1e3 / iterations as f64;

    let batches: Vec<_> = (0..iterations).map(|i| trainer.batch_for(i)).collect::<Result<_, _>>()?;
    let t0 = Instant::now();
    for i in 0..iterations {
        std::hint::black_box(trainer.batch_for(i)?);
    }
    let batch_ms = t0.elapsed().as_secs_f64() * 1e3 / iterations as f64;

    let fields = trainer.fields();
    let mut grads = FieldGrads::for_fields(fields);
    let mut workers = vec![Worker::new(fields, &config.quad)];
    let aabb = trainer.geometry().aabb;
    let t0 = Instant::now();
    for b in &batches {
        compute_loss(fields, &aabb, b, &config.quad, config.lambda_reg, &mut grads, &mut workers, false)?;
    }
    let loss_ms = t0.elapsed().as_secs_f64() * 1e3 / iterations as f64;

    println!("step {step_ms:.2} ms = batch {batch_ms:.2} + forward/backward {loss_ms:.2} + update {:.2}", step_ms - batch_ms - loss_ms);
    Ok(())
}
