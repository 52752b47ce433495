//! Analytic dynamic vascular phantoms.
//!
//! Vessels are spheres and capsules whose contrast attenuation ramps
//! linearly from zero to a peak value. Line integrals through them are exact,
//! which makes the phantom the ground-truth oracle for data generation,
//! rendering and reconstruction tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset_io::{Dataset, DatasetManifest, Image, Provenance};
use crate::error::{bail_arg, Error, Result};
use crate::geometry::{rotate_z, Aabb, ScanGeometry, Vec3};
use crate::reconstructor::{Lattice, VolumeImage};

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    Capsule { p0: [f64; 3], p1: [f64; 3], radius: f64 },
}

impl Shape {
    pub fn radius(&self) -> f64 {
        match *self {
            Shape::Sphere { radius, .. } | Shape::Capsule { radius, .. } => radius,
        }
    }

    /// Signed distance (negative inside).
    pub fn signed_distance(&self, x: &Vec3) -> f64 {
        match self {
            Shape::Sphere { center, radius } => (x - v3(*center)).norm() - radius,
            Shape::Capsule { p0, p1, radius } => {
                let (a, b) = (v3(*p0), v3(*p1));
                let ab = b - a;
                let len2 = ab.norm_squared();
                let h = if len2 > 0.0 {
                    ((x - a).dot(&ab) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                (x - (a + ab * h)).norm() - radius
            }
        }
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        self.signed_distance(x) <= 0.0
    }

    /// Interval of the full line `o + s d` (unit `d`) inside the shape.
    ///
    /// Both shapes are convex, so the intersection is a single interval.
    pub fn line_interval(&self, o: &Vec3, d: &Vec3) -> Option<(f64, f64)> {
        match self {
            Shape::Sphere { center, radius } => sphere_interval(o, d, &v3(*center), *radius),
            Shape::Capsule { p0, p1, radius } => capsule_interval(o, d, &v3(*p0), &v3(*p1), *radius),
        }
    }

    pub fn rotated_z(&self, angle_rad: f64) -> Shape {
        let r = |p: &[f64; 3]| {
            let q = rotate_z(&v3(*p), angle_rad);
            [q.x, q.y, q.z]
        };
        match self {
            Shape::Sphere { center, radius } => Shape::Sphere {
                center: r(center),
                radius: *radius,
            },
            Shape::Capsule { p0, p1, radius } => Shape::Capsule {
                p0: r(p0),
                p1: r(p1),
                radius: *radius,
            },
        }
    }

    pub fn surface_area(&self) -> f64 {
        use std::f64::consts::PI;
        match self {
            Shape::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Shape::Capsule { p0, p1, radius } => {
                let h = (v3(*p1) - v3(*p0)).norm();
                2.0 * PI * radius * h + 4.0 * PI * radius * radius
            }
        }
    }

    fn bounding_points(&self) -> Vec<(Vec3, f64)> {
        match self {
            Shape::Sphere { center, radius } => vec![(v3(*center), *radius)],
            Shape::Capsule { p0, p1, radius } => vec![(v3(*p0), *radius), (v3(*p1), *radius)],
        }
    }
}

fn sphere_interval(o: &Vec3, d: &Vec3, c: &Vec3, r: f64) -> Option<(f64, f64)> {
    let oc = o - c;
    let b = oc.dot(d);
    // perpendicular offset avoids cancellation for distant sources
    let perp = oc - d * b;
    let disc = r * r - perp.norm_squared();
    if disc <= 0.0 {
        return None;
    }
    let q = disc.sqrt();
    Some((-b - q, -b + q))
}

fn capsule_interval(o: &Vec3, d: &Vec3, p0: &Vec3, p1: &Vec3, r: f64) -> Option<(f64, f64)> {
    let axis = p1 - p0;
    let h = axis.norm();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut merge = |iv: Option<(f64, f64)>| {
        if let Some((a, b)) = iv {
            lo = lo.min(a);
            hi = hi.max(b);
        }
    };
    merge(sphere_interval(o, d, p0, r));
    merge(sphere_interval(o, d, p1, r));
    if h > 0.0 {
        let a = axis / h;
        let w = o - p0;
        let (wa, da) = (w.dot(&a), d.dot(&a));
        let w_perp = w - a * wa;
        let d_perp = d - a * da;
        let qa = d_perp.norm_squared();
        let qc = w_perp.norm_squared() - r * r;
        // radial part: infinite cylinder
        let radial = if qa < 1e-300 {
            (qc <= 0.0).then_some((f64::NEG_INFINITY, f64::INFINITY))
        } else {
            let qb = w_perp.dot(&d_perp);
            let disc = qb * qb - qa * qc;
            if disc <= 0.0 {
                None
            } else {
                let sq = disc.sqrt();
                Some(((-qb - sq) / qa, (-qb + sq) / qa))
            }
        };
        // axial part: slab 0 <= (x - p0).a <= h
        let axial = if da == 0.0 {
            (0.0..=h).contains(&wa).then_some((f64::NEG_INFINITY, f64::INFINITY))
        } else {
            let s0 = -wa / da;
            let s1 = (h - wa) / da;
            Some((s0.min(s1), s0.max(s1)))
        };
        if let (Some(rad), Some(ax)) = (radial, axial) {
            let (a0, a1) = (rad.0.max(ax.0), rad.1.min(ax.1));
            if a0 < a1 {
                merge(Some((a0, a1)));
            }
        }
    }
    (lo < hi).then_some((lo, hi))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    /// Contrast attenuation at full fill (mm^-1).
    pub mu_peak: f64,
    /// Normalized time at which contrast arrives.
    pub fill_start: f64,
    /// Duration of the linear ramp from 0 to `mu_peak`.
    pub fill_ramp: f64,
}

impl Primitive {
    pub fn fill(&self, t: f64) -> f64 {
        if t < self.fill_start {
            return 0.0;
        }
        if self.fill_ramp <= 0.0 {
            return self.mu_peak;
        }
        self.mu_peak * ((t - self.fill_start) / self.fill_ramp).min(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.shape.radius() > 0.0
            && self.mu_peak >= 0.0
            && self.fill_start >= 0.0
            && self.fill_ramp >= 0.0
            && self.mu_peak.is_finite()
            && self.fill_start.is_finite()
            && self.fill_ramp.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid primitive {self:?}")))
        }
    }
}

/// Exact length of the ray segment (`s >= 0`) inside the primitive.
pub fn chord_length(origin: &Vec3, direction: &Vec3, primitive: &Primitive) -> f64 {
    shape_chord(origin, direction, &primitive.shape)
}

fn shape_chord(origin: &Vec3, direction: &Vec3, shape: &Shape) -> f64 {
    match shape.line_interval(origin, direction) {
        Some((a, b)) => (b.max(0.0) - a.max(0.0)).max(0.0),
        None => 0.0,
    }
}

/// Time-invariant tissue, an ellipsoid of constant attenuation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundModel {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub mu_bg: f64,
    /// Source intensity.
    pub i0: f64,
}

impl BackgroundModel {
    pub fn chord_length(&self, o: &Vec3, d: &Vec3) -> f64 {
        let ax = v3(self.semi_axes);
        let c = v3(self.center);
        let o2 = (o - c).component_div(&ax);
        let d2 = d.component_div(&ax);
        let qa = d2.norm_squared();
        let qb = o2.dot(&d2);
        // closest approach in the scaled frame, as for spheres
        let s_mid = -qb / qa;
        let perp = o2 + d2 * s_mid;
        let disc = 1.0 - perp.norm_squared();
        if disc <= 0.0 {
            return 0.0;
        }
        let half = (disc / qa).sqrt();
        let (s0, s1) = (s_mid - half, s_mid + half);
        (s1.max(0.0) - s0.max(0.0)).max(0.0)
    }
}

/// Intensities of one ray through the mask/fill imaging chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskFill {
    /// Mask-run intensity.
    pub i1: f64,
    /// Fill-run intensity.
    pub i2: f64,
    /// Log-domain subtraction `ln I1 - ln I2`.
    pub dsa: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomScene {
    pub primitives: Vec<Primitive>,
    pub background: BackgroundModel,
    pub aabb: Aabb,
}

impl PhantomScene {
    pub fn empty(aabb: Aabb) -> Self {
        Self {
            primitives: Vec::new(),
            background: BackgroundModel {
                center: [0.0; 3],
                semi_axes: [1.0; 3],
                mu_bg: 0.0,
                i0: 1.0,
            },
            aabb,
        }
    }

    /// Trunk, two branches and an aneurysm, filling progressively along the
    /// flow. Peak values are chosen so every vessel has roughly the same
    /// time-averaged attenuation (0.02 mm^-1).
    pub fn branching_y() -> Self {
        let avg = 0.02;
        let vessel = |shape: Shape, start: f64, ramp: f64| Primitive {
            shape,
            mu_peak: avg / (1.0 - start - ramp / 2.0),
            fill_start: start,
            fill_ramp: ramp,
        };
        Self {
            primitives: vec![
                vessel(
                    Shape::Capsule {
                        p0: [0.0, 0.0, -95.0],
                        p1: [0.0, 0.0, -10.0],
                        radius: 9.0,
                    },
                    0.0,
                    0.15,
                ),
                vessel(
                    Shape::Capsule {
                        p0: [0.0, 0.0, -10.0],
                        p1: [-55.0, 15.0, 60.0],
                        radius: 7.0,
                    },
                    0.1,
                    0.2,
                ),
                vessel(
                    Shape::Capsule {
                        p0: [0.0, 0.0, -10.0],
                        p1: [50.0, -20.0, 70.0],
                        radius: 6.0,
                    },
                    0.15,
                    0.2,
                ),
                vessel(
                    Shape::Sphere {
                        center: [-62.0, 17.0, 71.0],
                        radius: 13.0,
                    },
                    0.3,
                    0.3,
                ),
            ],
            background: BackgroundModel {
                center: [0.0; 3],
                semi_axes: [100.0, 90.0, 105.0],
                mu_bg: 0.02,
                i0: 1.0,
            },
            aabb: Aabb::cube(220.0),
        }
    }

    /// Same vessels as [`branching_y`](Self::branching_y) but the contrast
    /// reaches every vessel within the first tenth of the sequence.
    pub fn fast_fill_y() -> Self {
        let mut scene = Self::branching_y();
        let timing = [(0.0, 0.04), (0.02, 0.05), (0.04, 0.05), (0.06, 0.08)];
        for (p, (start, ramp)) in scene.primitives.iter_mut().zip(timing) {
            p.fill_start = start;
            p.fill_ramp = ramp;
            p.mu_peak = 0.02 / (1.0 - start - ramp / 2.0);
        }
        scene
    }

    /// Looks up a built-in scene by name.
    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "branching-y" => Some(Self::branching_y()),
            "fast-fill-y" => Some(Self::fast_fill_y()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.aabb.is_valid() {
            return Err(Error::Config("scene box is invalid".into()));
        }
        if self.background.mu_bg < 0.0 || self.background.i0 <= 0.0 {
            return Err(Error::Config("background needs mu_bg >= 0 and i0 > 0".into()));
        }
        for p in &self.primitives {
            p.validate()?;
            for (c, r) in p.shape.bounding_points() {
                let inside = (0..3).all(|i| c[i] - r >= self.aabb.min[i] && c[i] + r <= self.aabb.max[i]);
                if !inside {
                    return Err(Error::Config(format!("primitive {:?} leaves the scene box", p.shape)));
                }
            }
        }
        Ok(())
    }

    /// Ground-truth contrast attenuation at a world point.
    pub fn atten_at(&self, x: &Vec3, t: f64) -> f64 {
        self.primitives
            .iter()
            .filter(|p| p.shape.contains(x))
            .map(|p| p.fill(t))
            .sum()
    }

    /// Whether `x` lies inside any vessel, regardless of fill state.
    pub fn in_vessel(&self, x: &Vec3) -> bool {
        self.primitives.iter().any(|p| p.shape.contains(x))
    }

    /// Exact line integral of contrast attenuation along a unit-direction ray.
    pub fn project_analytic(&self, origin: &Vec3, direction: &Vec3, t: f64) -> f64 {
        self.primitives
            .iter()
            .map(|p| {
                let f = p.fill(t);
                if f == 0.0 {
                    0.0
                } else {
                    chord_length(origin, direction, p) * f
                }
            })
            .sum()
    }

    /// Runs the mask-run / fill-run / log-subtraction chain for one ray.
    pub fn simulate_mask_fill(&self, origin: &Vec3, direction: &Vec3, t: f64) -> MaskFill {
        let bg = &self.background;
        let tissue = bg.mu_bg * bg.chord_length(origin, direction);
        let contrast = self.project_analytic(origin, direction, t);
        let i1 = bg.i0 * (-tissue).exp();
        let i2 = i1 * (-contrast).exp();
        MaskFill {
            i1,
            i2,
            dsa: i1.ln() - i2.ln(),
        }
    }

    pub fn rotated_z(&self, angle_rad: f64) -> Self {
        let mut out = self.clone();
        for p in &mut out.primitives {
            p.shape = p.shape.rotated_z(angle_rad);
        }
        let c = rotate_z(&v3(self.background.center), angle_rad);
        out.background.center = [c.x, c.y, c.z];
        out
    }

    /// Area-uniform samples on the boundary of the union of all vessels.
    pub fn sample_surface(&self, count: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if self.primitives.is_empty() {
            return Vec::new();
        }
        // Caps are drawn as full spheres; the inner halves are rejected below,
        // so each cap's proposal weight is its full sphere area.
        let weights: Vec<f64> = self
            .primitives
            .iter()
            .map(|p| match &p.shape {
                Shape::Sphere { .. } => p.shape.surface_area(),
                Shape::Capsule { radius, .. } => p.shape.surface_area() + 4.0 * std::f64::consts::PI * radius * radius,
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let mut pick = rng.random::<f64>() * total;
            let mut idx = 0;
            while idx + 1 < weights.len() && pick >= weights[idx] {
                pick -= weights[idx];
                idx += 1;
            }
            let x = sample_shape_surface(&self.primitives[idx].shape, &mut rng);
            let buried = self
                .primitives
                .iter()
                .any(|p| p.shape.signed_distance(&x) < -1e-9);
            if !buried {
                out.push(x);
            }
        }
        out
    }
}

fn unit_vector(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

fn sample_shape_surface(shape: &Shape, rng: &mut impl Rng) -> Vec3 {
    match shape {
        Shape::Sphere { center, radius } => v3(*center) + unit_vector(rng) * *radius,
        Shape::Capsule { p0, p1, radius } => {
            use std::f64::consts::PI;
            let (a, b) = (v3(*p0), v3(*p1));
            let h = (b - a).norm();
            let side = 2.0 * PI * radius * h;
            let cap = 4.0 * PI * radius * radius;
            let pick = rng.random::<f64>() * (side + 2.0 * cap);
            if pick < side {
                let axis = (b - a) / h;
                let helper = if axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
                let e1 = axis.cross(&helper).normalize();
                let e2 = axis.cross(&e1);
                let phi = rng.random::<f64>() * 2.0 * PI;
                a + axis * (rng.random::<f64>() * h) + (e1 * phi.cos() + e2 * phi.sin()) * *radius
            } else if pick < side + cap {
                a + unit_vector(rng) * *radius
            } else {
                b + unit_vector(rng) * *radius
            }
        }
    }
}

/// Ground-truth contrast attenuation sampled at voxel centers.
pub fn ground_truth_volume(scene: &PhantomScene, lattice: &Lattice, t: f64) -> VolumeImage {
    let values = lattice
        .centers_par()
        .map(|x| scene.atten_at(&x, t) as f32)
        .collect();
    VolumeImage::new(lattice.clone(), values, "ground_truth_mu_c", Some(t))
}

/// Renders projections of the phantom for the listed frames.
///
/// Pixels are exact line integrals; with `noise_sigma > 0` Gaussian noise is
/// added and the result clamped at zero. Noise for each frame comes from its
/// own stream so the output does not depend on thread scheduling.
pub fn generate_dataset(
    scene: &PhantomScene,
    geometry: &ScanGeometry,
    frame_indices: &[usize],
    noise_sigma: f64,
    seed: u64,
    scene_label: &str,
) -> Result<Dataset> {
    geometry.validate()?;
    if noise_sigma < 0.0 || !noise_sigma.is_finite() {
        bail_arg!("noise sigma must be a finite non-negative number");
    }
    if frame_indices.windows(2).any(|w| w[1] <= w[0]) {
        bail_arg!("frame indices must be strictly increasing");
    }
    let poses = frame_indices
        .iter()
        .map(|&i| geometry.pose_for_frame(i))
        .collect::<Result<Vec<_>>>()?;
    let images = poses
        .par_iter()
        .map(|pose| {
            let mut img = Image::zeros(geometry.det_cols, geometry.det_rows);
            for row in 0..geometry.det_rows {
                for col in 0..geometry.det_cols {
                    let ray = geometry.ray_for_pixel(pose, col as f64, row as f64);
                    let v = scene.project_analytic(&ray.origin, &ray.direction, pose.t_norm);
                    img.set(col, row, v as f32);
                }
            }
            if noise_sigma > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (pose.frame_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let normal = Normal::new(0.0, noise_sigma).expect("sigma validated");
                for v in &mut img.data {
                    *v = (*v as f64 + normal.sample(&mut rng)).max(0.0) as f32;
                }
            }
            img
        })
        .collect();
    Ok(Dataset {
        manifest: DatasetManifest::new(
            geometry.clone(),
            &poses,
            Provenance::Phantom {
                scene: scene_label.to_string(),
                seed,
                noise_sigma,
            },
        ),
        images,
    })
}
