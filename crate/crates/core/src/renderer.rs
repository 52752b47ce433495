//! Line-integral rendering along cone-beam rays.
//!
//! A DSA pixel is the integral of contrast attenuation along its ray, with
//! no occlusion or compositing. The integral is discretized with the
//! midpoint rule over `K` equal segments of the ray's box interval; during
//! training each sample is jittered uniformly within its segment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset_io::Image;
use crate::error::{bail_arg, Error, Result};
use crate::fields::{FieldGrads, FieldScratch, FieldSet, PointCache};
use crate::geometry::{Aabb, FramePose, Interval, Ray, ScanGeometry, Vec3};
use crate::phantom::PhantomScene;
use crate::real::Real;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadratureConfig {
    pub samples_per_ray: usize,
    /// Stratified uniform jitter within each segment.
    pub jitter: bool,
}

impl QuadratureConfig {
    pub fn train() -> Self {
        Self {
            samples_per_ray: 512,
            jitter: true,
        }
    }

    pub fn eval() -> Self {
        Self {
            samples_per_ray: 1024,
            jitter: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray < 2 {
            bail_arg!("samples_per_ray must be at least 2, got {}", self.samples_per_ray);
        }
        Ok(())
    }
}

/// Fills `out` with sample distances for `interval` and returns the segment
/// length. Without jitter the samples sit at segment midpoints.
pub fn sample_positions(interval: Interval, k: usize, jitter_seed: Option<u64>, out: &mut Vec<f64>) -> f64 {
    out.clear();
    let ds = interval.length() / k as f64;
    match jitter_seed {
        None => out.extend((0..k).map(|i| interval.near + (i as f64 + 0.5) * ds)),
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            out.extend((0..k).map(|i| interval.near + (i as f64 + rng.random::<f64>()) * ds));
        }
    }
    ds
}

/// A scalar attenuation field over world space and normalized time.
pub trait Integrand: Sync {
    /// Per-thread evaluation state.
    type Scratch;

    fn scratch(&self) -> Self::Scratch;

    fn at(&self, x: &Vec3, t: f64, scratch: &mut Self::Scratch) -> f64;
}

impl Integrand for PhantomScene {
    type Scratch = ();

    fn scratch(&self) {}

    fn at(&self, x: &Vec3, t: f64, _: &mut ()) -> f64 {
        self.atten_at(x, t)
    }
}

/// Wraps a closure `(x, t) -> mu` as an integrand.
pub struct FnIntegrand<F>(pub F);

impl<F: Fn(&Vec3, f64) -> f64 + Sync> Integrand for FnIntegrand<F> {
    type Scratch = ();

    fn scratch(&self) {}

    fn at(&self, x: &Vec3, t: f64, _: &mut ()) -> f64 {
        (self.0)(x, t)
    }
}

/// Which part of the composed field to integrate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldComponent {
    Full,
    Static,
    Dynamic,
}

impl std::str::FromStr for FieldComponent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "static" => Ok(Self::Static),
            "dynamic" => Ok(Self::Dynamic),
            other => Err(Error::InvalidArgument(format!(
                "unknown render kind '{other}' (expected full, static or dynamic)"
            ))),
        }
    }
}

/// A trained field set seen as an integrand over world coordinates.
pub struct FieldIntegrand<'a, T> {
    pub fields: &'a FieldSet<T>,
    pub aabb: Aabb,
    pub component: FieldComponent,
}

impl<T: Real> Integrand for FieldIntegrand<'_, T> {
    type Scratch = PointCache<T>;

    fn scratch(&self) -> PointCache<T> {
        PointCache::new(self.fields)
    }

    fn at(&self, x: &Vec3, t: f64, cache: &mut PointCache<T>) -> f64 {
        self.fields.query_mu_c(self.aabb.to_unit(x), t, cache);
        match self.component {
            FieldComponent::Full => cache.mu_c(),
            FieldComponent::Static => cache.static_part(),
            FieldComponent::Dynamic => cache.dynamic_part(),
        }
        .as_f64()
    }
}

/// Integrates `integrand` over `interval` of `ray`.
pub fn render_interval<I: Integrand + ?Sized>(
    ray: &Ray,
    interval: Interval,
    t: f64,
    integrand: &I,
    quad: &QuadratureConfig,
    jitter_seed: u64,
    scratch: &mut I::Scratch,
) -> f64 {
    let mut s = Vec::with_capacity(quad.samples_per_ray);
    let jitter = quad.jitter.then_some(jitter_seed);
    let ds = sample_positions(interval, quad.samples_per_ray, jitter, &mut s);
    s.iter().map(|&sk| integrand.at(&ray.at(sk), t, scratch)).sum::<f64>() * ds
}

/// Integrates `integrand` along the ray's box interval; zero on a miss.
pub fn render<I: Integrand + ?Sized>(
    ray: &Ray,
    t: f64,
    integrand: &I,
    quad: &QuadratureConfig,
    jitter_seed: u64,
) -> f64 {
    match ray.bounds {
        None => 0.0,
        Some(iv) => {
            let mut scratch = integrand.scratch();
            render_interval(ray, iv, t, integrand, quad, jitter_seed, &mut scratch)
        }
    }
}

/// Renders a full detector image at `pose`, parallel over rows.
///
/// Pixel jitter seeds derive from `seed` and the pixel index, so the result
/// does not depend on scheduling.
pub fn render_image<I: Integrand + ?Sized>(
    geometry: &ScanGeometry,
    pose: &FramePose,
    t: f64,
    integrand: &I,
    quad: &QuadratureConfig,
    seed: u64,
) -> Image {
    let cols = geometry.det_cols;
    let mut data = vec![0.0f32; geometry.pixel_count()];
    data.par_chunks_mut(cols).enumerate().for_each(|(row, out)| {
        let mut scratch = integrand.scratch();
        let mut s = Vec::with_capacity(quad.samples_per_ray);
        for (col, px) in out.iter_mut().enumerate() {
            let ray = geometry.ray_for_pixel(pose, col as f64, row as f64);
            let Some(iv) = ray.bounds else { continue };
            let jitter = quad.jitter.then(|| seed::derive(seed, (row * cols + col) as u64));
            let ds = sample_positions(iv, quad.samples_per_ray, jitter, &mut s);
            let sum: f64 = s.iter().map(|&sk| integrand.at(&ray.at(sk), t, &mut scratch)).sum();
            *px = (sum * ds) as f32;
        }
    });
    Image { cols, rows: geometry.det_rows, data }
}

/// Forward state of one training ray.
#[derive(Clone, Debug)]
pub struct RayCache<T> {
    points: Vec<PointCache<T>>,
    positions: Vec<f64>,
    used: usize,
    ds: f64,
    version: u64,
    valid: bool,
}

impl<T: Real> RayCache<T> {
    pub fn new(fields: &FieldSet<T>, quad: &QuadratureConfig) -> Self {
        Self {
            points: (0..quad.samples_per_ray).map(|_| PointCache::new(fields)).collect(),
            positions: Vec::with_capacity(quad.samples_per_ray),
            used: 0,
            ds: 0.0,
            version: u64::MAX,
            valid: false,
        }
    }

    /// Segment length of the last forward pass (0 on a miss).
    pub fn segment_length(&self) -> f64 {
        self.ds
    }

    pub fn samples(&self) -> &[PointCache<T>] {
        &self.points[..self.used]
    }
}

/// Renders the composed field along `ray`, keeping per-sample state for
/// [`render_backward`].
pub fn render_fields_cached<T: Real>(
    fields: &FieldSet<T>,
    aabb: &Aabb,
    ray: &Ray,
    t: f64,
    quad: &QuadratureConfig,
    jitter_seed: u64,
    cache: &mut RayCache<T>,
) -> T {
    cache.version = fields.version();
    cache.valid = true;
    let Some(iv) = ray.bounds else {
        cache.used = 0;
        cache.ds = 0.0;
        return T::zero();
    };
    if cache.points.len() < quad.samples_per_ray {
        cache.points.resize_with(quad.samples_per_ray, || PointCache::new(fields));
    }
    let jitter = quad.jitter.then_some(jitter_seed);
    cache.ds = sample_positions(iv, quad.samples_per_ray, jitter, &mut cache.positions);
    cache.used = quad.samples_per_ray;
    let mut sum = 0.0f64;
    for (pc, &s) in cache.points.iter_mut().zip(&cache.positions) {
        sum += fields.query_mu_c(aabb.to_unit(&ray.at(s)), t, pc).as_f64();
    }
    T::of(sum * cache.ds)
}

/// Backpropagates `dL/dI` through the quadrature: every sample receives
/// `dL/dmu_c = dL/dI * ds`.
pub fn render_backward<T: Real>(
    fields: &FieldSet<T>,
    cache: &RayCache<T>,
    d_image: T,
    grads: &mut FieldGrads<T>,
    scratch: &mut FieldScratch<T>,
) -> Result<()> {
    if !cache.valid {
        return Err(Error::State("render_backward without a cached forward pass".into()));
    }
    if cache.version != fields.version() {
        return Err(Error::State(format!(
            "stale ray cache: rendered at parameter version {}, fields are at {}",
            cache.version,
            fields.version()
        )));
    }
    let d_mu = d_image * T::of(cache.ds);
    if d_mu == T::zero() {
        return Ok(());
    }
    for pc in cache.samples() {
        fields.backward_mu_c(pc, d_mu, grads, scratch)?;
    }
    Ok(())
}
