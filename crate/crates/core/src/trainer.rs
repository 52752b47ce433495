//! Optimization of the field set against projection data.
//!
//! Every iteration draws a batch of training rays (uniform over frame and
//! pixel, with replacement) and a fresh batch of regularization points,
//! renders each ray at a timestamp jittered by Gaussian noise whose scale is
//! `k` times the training frame spacing, and minimizes
//! `mean |I_hat - I| + lambda * mean p`. The step is a barrier: workers run
//! forward and backward over disjoint slices of the batch into private
//! gradient buffers, the buffers are merged in worker order, and a single
//! Adam update follows.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset_io::{save_checkpoint, write_json, Checkpoint, Dataset};
use crate::error::{bail_arg, Error, Result};
use crate::fields::{
    CompositionMode, FieldGrads, FieldScratch, FieldSet, FieldSetConfig, ParamBlock, PointCache,
};
use crate::geometry::{FramePose, Ray, ScanGeometry};
use crate::hash_encoding::LevelSchedule;
use crate::network::{adam_step, AdamConfig, AdamMoments};
use crate::real::Real;
use crate::renderer::{render_backward, render_fields_cached, QuadratureConfig, RayCache};
use crate::seed;

/// Switches for the ablation study. All on is the full method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    /// Off: naive `mu_s + mu_d` composition without the probability field.
    pub use_vessel_prob: bool,
    /// Off: all hash levels active from the first iteration.
    pub use_progressive: bool,
    /// Off: rays are rendered at their measured timestamp.
    pub use_temporal_perturb: bool,
    /// Off: no sparsity penalty on the vessel probability.
    pub use_lreg: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_vessel_prob: true,
            use_progressive: true,
            use_temporal_perturb: true,
            use_lreg: true,
        }
    }
}

/// How workers combine hash-table gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// Private buffers merged in fixed order; deterministic.
    Private,
    /// Shared atomic accumulators; less memory, not bitwise reproducible.
    Atomic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub ray_batch: usize,
    pub reg_points: usize,
    pub lambda_reg: f64,
    /// Temporal perturbation scale in units of the frame spacing.
    pub kernel_k: f64,
    pub iterations: u64,
    pub seed: u64,
    pub quad: QuadratureConfig,
    pub schedule: LevelSchedule,
    pub adam: AdamConfig,
    pub ablation: Ablation,
    pub fields: FieldSetConfig,
    /// Worker threads; 0 uses all available cores.
    pub workers: usize,
    pub grad_mode: GradMode,
    /// Write an intermediate checkpoint every this many iterations (0: only
    /// the final one).
    pub checkpoint_every: u64,
}

impl TrainConfig {
    /// Full-size settings: 2048 rays, 10k regularization points, 512 samples
    /// per ray, 100k iterations.
    pub fn paper() -> Self {
        Self {
            ray_batch: 2048,
            reg_points: 10_000,
            lambda_reg: 0.01,
            kernel_k: 1.0,
            iterations: 100_000,
            seed: 0,
            quad: QuadratureConfig::train(),
            schedule: LevelSchedule::default(),
            adam: AdamConfig::default(),
            ablation: Ablation::default(),
            fields: FieldSetConfig::paper(),
            workers: 0,
            grad_mode: GradMode::Private,
            checkpoint_every: 10_000,
        }
    }

    /// Single-machine phantom settings. Same loss, schedule and optimizer;
    /// smaller batches, fewer samples per ray and narrower fields.
    pub fn desk() -> Self {
        Self {
            ray_batch: 256,
            reg_points: 1024,
            iterations: 20_000,
            quad: QuadratureConfig {
                samples_per_ray: 64,
                jitter: true,
            },
            fields: FieldSetConfig::desk(),
            adam: AdamConfig {
                lr0: 7.5e-4,
                ..AdamConfig::default()
            },
            checkpoint_every: 0,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.ray_batch == 0 || self.reg_points == 0 || self.iterations == 0 {
            return cfg("ray_batch, reg_points and iterations must be positive".into());
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return cfg(format!("lambda_reg must be finite and non-negative, got {}", self.lambda_reg));
        }
        if !(self.kernel_k >= 0.0 && self.kernel_k.is_finite()) {
            return cfg(format!("kernel_k must be finite and non-negative, got {}", self.kernel_k));
        }
        if self.schedule.initial_levels == 0 || self.schedule.unlock_every == 0 {
            return cfg("schedule needs positive initial_levels and unlock_every".into());
        }
        if !(self.adam.lr0 > 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return cfg("adam needs lr0 > 0 and betas in [0, 1)".into());
        }
        self.quad.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.fields.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Field configuration with the composition mode implied by the ablation
    /// flags.
    pub fn effective_fields(&self) -> FieldSetConfig {
        let mut f = self.fields.clone();
        f.mode = if self.ablation.use_vessel_prob {
            CompositionMode::Guided
        } else {
            CompositionMode::Naive
        };
        f
    }

    pub fn resolved_workers(&self) -> usize {
        if self.workers == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.workers
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// One measured pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RaySample {
    /// Position in the dataset's frame list.
    pub frame: usize,
    pub col: usize,
    pub row: usize,
    pub t: f64,
    pub target: f32,
}

/// Draws `n` pixels uniformly over all (frame, pixel) pairs, with
/// replacement.
pub fn sample_ray_batch(dataset: &Dataset, n: usize, rng: &mut impl Rng) -> Result<Vec<RaySample>> {
    if dataset.is_empty() {
        bail_arg!("cannot sample rays from an empty dataset");
    }
    let g = dataset.geometry();
    let per_frame = g.pixel_count();
    let total = dataset.len() * per_frame;
    Ok((0..n)
        .map(|_| {
            let idx = rng.random_range(0..total);
            let (frame, pixel) = (idx / per_frame, idx % per_frame);
            RaySample {
                frame,
                col: pixel % g.det_cols,
                row: pixel / g.det_cols,
                t: dataset.manifest.frames[frame].t_norm,
                target: dataset.images[frame].data[pixel],
            }
        })
        .collect())
}

/// `t + tau` with `tau ~ N(0, (k * delta_t)^2)`, clamped to `[0, 1]`.
pub fn perturb_timestamp(t: f64, delta_t: f64, k: f64, rng: &mut impl Rng) -> f64 {
    let sigma = k * delta_t;
    if sigma <= 0.0 {
        return t;
    }
    let tau = Normal::new(0.0, sigma).expect("sigma is positive").sample(rng);
    (t + tau).clamp(0.0, 1.0)
}

/// Spacing of the (sorted) training timestamps; 0 for a single frame.
pub fn training_delta_t(timestamps: &[f64]) -> f64 {
    if timestamps.len() < 2 {
        return 0.0;
    }
    let (lo, hi) = timestamps
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &t| (a.min(t), b.max(t)));
    (hi - lo) / (timestamps.len() - 1) as f64
}

/// A ray ready to render: world ray, render timestamp, target, jitter seed.
#[derive(Clone, Copy, Debug)]
pub struct RayTask {
    pub ray: Ray,
    pub t: f64,
    pub target: f32,
    pub jitter_seed: u64,
}

#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub rays: Vec<RayTask>,
    /// Normalized coordinates in the unit cube.
    pub reg_points: Vec<[f64; 3]>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l1: f64,
    pub lreg: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
struct Scratchpad<T> {
    ray: RayCache<T>,
    point: PointCache<T>,
    scratch: FieldScratch<T>,
}

/// Per-worker forward/backward state and private gradient buffer.
#[derive(Clone, Debug)]
pub struct Worker<T> {
    pad: Scratchpad<T>,
    grads: FieldGrads<T>,
}

impl<T: Real> Worker<T> {
    pub fn new(fields: &FieldSet<T>, quad: &QuadratureConfig) -> Self {
        Self {
            pad: Scratchpad {
                ray: RayCache::new(fields, quad),
                point: PointCache::new(fields),
                scratch: FieldScratch::new(fields),
            },
            grads: FieldGrads::for_fields(fields),
        }
    }
}

fn run_slice<T: Real>(
    fields: &FieldSet<T>,
    aabb: &crate::geometry::Aabb,
    rays: &[RayTask],
    reg: &[[f64; 3]],
    quad: &QuadratureConfig,
    d_l1: T,
    d_reg: T,
    w: &mut Scratchpad<T>,
    grads: &mut FieldGrads<T>,
) -> Result<(f64, f64)> {
    let mut l1 = 0.0;
    for task in rays {
        let pred = render_fields_cached(fields, aabb, &task.ray, task.t, quad, task.jitter_seed, &mut w.ray);
        let resid = pred.as_f64() - task.target as f64;
        l1 += resid.abs();
        let sign = if resid > 0.0 {
            T::one()
        } else if resid < 0.0 {
            -T::one()
        } else {
            T::zero()
        };
        render_backward(fields, &w.ray, sign * d_l1, grads, &mut w.scratch)?;
    }
    let mut preg = 0.0;
    for &x in reg {
        preg += fields.query_probability(x, &mut w.point).as_f64();
        fields.backward_probability(&w.point, d_reg, grads, &mut w.scratch)?;
    }
    Ok((l1, preg))
}

/// Loss and gradients for one batch.
///
/// Gradients are added into `grads`. `lambda_reg = 0` (or naive mode) skips
/// the regularizer entirely so the loss is exactly the rendering term. With
/// several workers each takes a contiguous slice of the batch; partial
/// losses and gradient buffers are combined in worker order, so results
/// depend on the worker count but not on scheduling (unless `atomic` is
/// set).
pub fn compute_loss<T: Real>(
    fields: &FieldSet<T>,
    aabb: &crate::geometry::Aabb,
    batch: &Batch,
    quad: &QuadratureConfig,
    lambda_reg: f64,
    grads: &mut FieldGrads<T>,
    workers: &mut [Worker<T>],
    atomic: bool,
) -> Result<LossParts> {
    if workers.is_empty() {
        bail_arg!("compute_loss needs at least one worker");
    }
    let use_reg = lambda_reg > 0.0 && fields.mode() == CompositionMode::Guided;
    let reg: &[[f64; 3]] = if use_reg { &batch.reg_points } else { &[] };
    let nb = batch.rays.len().max(1) as f64;
    let nr = reg.len().max(1) as f64;
    let d_l1 = T::of(1.0 / nb);
    let d_reg = T::of(lambda_reg / nr);

    let (l1_sum, p_sum) = if workers.len() == 1 {
        let w = &mut workers[0];
        run_slice(fields, aabb, &batch.rays, reg, quad, d_l1, d_reg, &mut w.pad, grads)?
    } else {
        let n = workers.len();
        let ray_chunk = batch.rays.len().div_ceil(n).max(1);
        let reg_chunk = reg.len().div_ceil(n).max(1);
        let sinks = atomic.then(|| FieldGrads::atomic_sinks(fields));
        let partials: Vec<Result<(f64, f64)>> = workers
            .par_iter_mut()
            .enumerate()
            .map(|(i, w)| {
                let rays = slice_chunk(&batch.rays, i, ray_chunk);
                let pts = slice_chunk(reg, i, reg_chunk);
                if let Some(s) = &sinks {
                    w.grads.attach_atomic(s.clone());
                }
                let out = run_slice(fields, aabb, rays, pts, quad, d_l1, d_reg, &mut w.pad, &mut w.grads);
                w.grads.detach_atomic();
                out
            })
            .collect();
        let mut sums = (0.0, 0.0);
        for (w, p) in workers.iter_mut().zip(partials) {
            let (a, b) = p?;
            sums.0 += a;
            sums.1 += b;
            grads.add_assign(&w.grads);
            w.grads.zero();
        }
        if let Some(s) = &sinks {
            grads.drain_atomic(s);
        }
        sums
    };
    let l1 = l1_sum / nb;
    let lreg = if use_reg { p_sum / nr } else { 0.0 };
    Ok(LossParts {
        l1,
        lreg,
        total: if use_reg { l1 + lambda_reg * lreg } else { l1 },
    })
}

fn slice_chunk<X>(items: &[X], i: usize, chunk: usize) -> &[X] {
    let lo = (i * chunk).min(items.len());
    let hi = ((i + 1) * chunk).min(items.len());
    &items[lo..hi]
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub l1: f64,
    pub lreg: f64,
    pub total: f64,
    pub lr: f64,
    pub active_levels: usize,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "iteration,l1,lreg,total,lr,active_levels";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{}",
            self.iteration, self.l1, self.lreg, self.total, self.lr, self.active_levels
        )
    }
}

// random streams per iteration
const STREAM_RAYS: u64 = 0;
const STREAM_TAU: u64 = 1;
const STREAM_REG: u64 = 2;
const STREAM_JITTER: u64 = 3;
const STREAMS: u64 = 4;
const STREAM_INIT: u64 = u64::MAX;

/// Stateful optimizer over one training dataset.
pub struct Trainer {
    config: TrainConfig,
    dataset: Dataset,
    poses: Vec<FramePose>,
    timestamps: Vec<f64>,
    delta_t: f64,
    fields: FieldSet<f32>,
    grads: FieldGrads<f32>,
    moments: Vec<AdamMoments<f32>>,
    workers: Vec<Worker<f32>>,
    pool: Option<rayon::ThreadPool>,
    iteration: u64,
}

impl Trainer {
    pub fn new(dataset: Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::Data("training dataset has no frames".into()));
        }
        dataset.manifest.validate()?;
        dataset.geometry().validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, STREAM_INIT));
        let fields = FieldSet::new(config.effective_fields(), &mut rng)?;
        let n_workers = config.resolved_workers();
        let pool = if n_workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n_workers)
                    .build()
                    .map_err(|e| Error::Config(format!("cannot start {n_workers} workers: {e}")))?,
            )
        } else {
            None
        };
        let workers = (0..n_workers).map(|_| Worker::new(&fields, &config.quad)).collect();
        let poses = dataset.manifest.poses();
        let timestamps = dataset.manifest.timestamps();
        Ok(Self {
            delta_t: training_delta_t(&timestamps),
            grads: FieldGrads::for_fields(&fields),
            moments: ParamBlock::ALL.iter().map(|&b| AdamMoments::new(fields.block(b).len())).collect(),
            fields,
            workers,
            pool,
            poses,
            timestamps,
            dataset,
            config,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn fields(&self) -> &FieldSet<f32> {
        &self.fields
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn delta_t(&self) -> f64 {
        self.delta_t
    }

    pub fn geometry(&self) -> &ScanGeometry {
        self.dataset.geometry()
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            fields: self.fields.clone(),
            iteration: self.iteration,
            geometry: self.dataset.geometry().clone(),
            timestamps: self.timestamps.clone(),
        }
    }

    /// Builds the batch for `iteration` from the seed alone.
    pub fn batch_for(&self, iteration: u64) -> Result<Batch> {
        let cfg = &self.config;
        let stream = |s| ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, iteration * STREAMS + s));
        let mut ray_rng = stream(STREAM_RAYS);
        let mut tau_rng = stream(STREAM_TAU);
        let mut reg_rng = stream(STREAM_REG);
        let jitter_base = seed::derive(cfg.seed, iteration * STREAMS + STREAM_JITTER);
        let k = if cfg.ablation.use_temporal_perturb { cfg.kernel_k } else { 0.0 };
        let g = self.dataset.geometry();
        let rays = sample_ray_batch(&self.dataset, cfg.ray_batch, &mut ray_rng)?
            .into_iter()
            .enumerate()
            .map(|(i, s)| RayTask {
                ray: g.ray_for_pixel(&self.poses[s.frame], s.col as f64, s.row as f64),
                t: perturb_timestamp(s.t, self.delta_t, k, &mut tau_rng),
                target: s.target,
                jitter_seed: seed::derive(jitter_base, i as u64),
            })
            .collect();
        let reg_points = (0..cfg.reg_points)
            .map(|_| [reg_rng.random(), reg_rng.random(), reg_rng.random()])
            .collect();
        Ok(Batch { rays, reg_points })
    }

    fn lambda(&self) -> f64 {
        if self.config.ablation.use_lreg {
            self.config.lambda_reg
        } else {
            0.0
        }
    }

    /// Runs one optimization step and returns its log row.
    pub fn step(&mut self) -> Result<LossRecord> {
        let it = self.iteration;
        let levels = self.config.fields.spatial_grid.levels;
        let active = if self.config.ablation.use_progressive {
            self.fields.apply_schedule(it, &self.config.schedule)
        } else {
            self.fields.set_active_levels(levels);
            levels
        };
        let batch = self.batch_for(it)?;
        let lambda = self.lambda();
        let atomic = self.config.grad_mode == GradMode::Atomic;
        let aabb = self.dataset.geometry().aabb;
        let (fields, grads, workers, quad) = (&self.fields, &mut self.grads, &mut self.workers, &self.config.quad);
        let loss = match &self.pool {
            Some(pool) => pool.install(|| compute_loss(fields, &aabb, &batch, quad, lambda, grads, workers, atomic))?,
            None => compute_loss(fields, &aabb, &batch, quad, lambda, grads, workers, atomic)?,
        };
        let lr = self.config.adam.lr_at(it);
        if !loss.total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at iteration {it}: l1 = {}, lreg = {}, lr = {lr:e}, active levels = {active}",
                loss.l1, loss.lreg
            )));
        }
        for (i, b) in ParamBlock::ALL.into_iter().enumerate() {
            let g = self.grads.block_mut(b);
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in {} at index {bad}, iteration {it} (l1 = {}, lreg = {}, lr = {lr:e})",
                    b.name(),
                    loss.l1,
                    loss.lreg
                )));
            }
            // split borrows: parameters live in fields, gradients in self.grads
            let params = self.fields.block_mut(b);
            adam_step(params, g, &mut self.moments[i], it, &self.config.adam);
        }
        self.iteration += 1;
        Ok(LossRecord {
            iteration: it,
            l1: loss.l1,
            lreg: loss.lreg,
            total: loss.total,
            lr,
            active_levels: active,
        })
    }

    /// Consumes the trainer, returning the trained fields.
    pub fn into_fields(self) -> FieldSet<f32> {
        self.fields
    }
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<LossRecord>,
    pub final_checkpoint_path: Option<PathBuf>,
}

/// Runs `config.iterations` steps. With `out_dir`, writes `loss.csv`, the
/// resolved configuration, periodic checkpoints under `checkpoints/` and
/// `checkpoint_final.f32`. `on_step` sees every log row.
pub fn train(
    dataset: Dataset,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(dataset, config.clone())?;
    let mut log = match out_dir {
        Some(dir) => {
            write_json(&dir.join("train_config.resolved.json"), config)?;
            let path = dir.join("loss.csv");
            let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{}", LossRecord::CSV_HEADER).map_err(|e| Error::io(&path, e))?;
            Some((w, path))
        }
        None => None,
    };
    let mut history = Vec::with_capacity(config.iterations as usize);
    for _ in 0..config.iterations {
        let rec = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                if let Some((w, _)) = log.as_mut() {
                    let _ = w.flush();
                }
                return Err(e);
            }
        };
        if let Some((w, path)) = log.as_mut() {
            writeln!(w, "{}", rec.csv_row()).map_err(|e| Error::io(&*path, e))?;
        }
        on_step(&rec);
        history.push(rec);
        if let Some(dir) = out_dir {
            let done = trainer.iteration();
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.iterations {
                save_checkpoint(&dir.join(format!("checkpoints/ckpt_{done:06}.f32")), &trainer.checkpoint())?;
            }
        }
    }
    let mut final_path = None;
    if let Some((mut w, path)) = log {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = out_dir {
        let p = dir.join("checkpoint_final.f32");
        save_checkpoint(&p, &checkpoint)?;
        final_path = Some(p);
    }
    Ok(TrainOutcome {
        checkpoint,
        history,
        final_checkpoint_path: final_path,
    })
}

/// Renders the composed field at every frame of `dataset` (deterministic
/// midpoints when `quad.jitter` is off) and scores it against the images.
pub fn evaluate_views<T: Real>(
    fields: &FieldSet<T>,
    dataset: &Dataset,
    quad: &QuadratureConfig,
    data_range: Option<f64>,
) -> Result<(Vec<crate::dataset_io::Image>, crate::metrics::MetricReport)> {
    use crate::renderer::{render_image, FieldComponent, FieldIntegrand};
    quad.validate()?;
    let g = dataset.geometry();
    let integrand = FieldIntegrand {
        fields,
        aabb: g.aabb,
        component: FieldComponent::Full,
    };
    let mut preds = Vec::with_capacity(dataset.len());
    let mut labels = Vec::with_capacity(dataset.len());
    for frame in &dataset.manifest.frames {
        let pose = g.pose_for_frame(frame.frame_index)?;
        preds.push(render_image(g, &pose, frame.t_norm, &integrand, quad, 0));
        labels.push(format!("frame_{:04}", frame.frame_index));
    }
    let mut report = crate::metrics::evaluate_images(&preds, &dataset.images, &labels, data_range)?;
    report.meta.insert("samples_per_ray".into(), quad.samples_per_ray.to_string());
    Ok((preds, report))
}
