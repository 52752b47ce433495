//! Rotational cone-beam acquisition geometry.
//!
//! World frame: isocenter at the origin, the gantry rotates about +z. At
//! angle 0 the source sits at `(0, -sod, 0)` and the detector plane is
//! `y = sdd - sod` with its u-axis along +x and v-axis along +z. Detector
//! coordinates are continuous pixel indices; pixel `(c, r)` has its center at
//! `(c, r)` and the detector center is at `((cols-1)/2, (rows-1)/2)`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Error, Result};

pub type Vec3 = Vector3<f64>;

/// Axis-aligned box in world millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    /// Cube of the given side centred on the isocenter.
    pub fn cube(side: f64) -> Self {
        let h = side / 2.0;
        Self::new([-h, -h, -h], [h, h, h])
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|i| self.min[i].is_finite() && self.max[i].is_finite() && self.min[i] < self.max[i])
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Maps a world point to `[0,1]^3` (unclamped).
    #[inline]
    pub fn to_unit(&self, p: &Vec3) -> [f64; 3] {
        [
            (p[0] - self.min[0]) / (self.max[0] - self.min[0]),
            (p[1] - self.min[1]) / (self.max[1] - self.min[1]),
            (p[2] - self.min[2]) / (self.max[2] - self.min[2]),
        ]
    }

    #[inline]
    pub fn from_unit(&self, u: [f64; 3]) -> Vec3 {
        Vec3::new(
            self.min[0] + u[0] * (self.max[0] - self.min[0]),
            self.min[1] + u[1] * (self.max[1] - self.min[1]),
            self.min[2] + u[2] * (self.max[2] - self.min[2]),
        )
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let mut out = [Vec3::zeros(); 8];
        for (c, p) in out.iter_mut().enumerate() {
            for axis in 0..3 {
                p[axis] = if c >> axis & 1 == 1 { self.max[axis] } else { self.min[axis] };
            }
        }
        out
    }
}

/// Parametric interval `[near, far]` along a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub near: f64,
    pub far: f64,
}

impl Interval {
    pub fn length(&self) -> f64 {
        self.far - self.near
    }
}

/// Slab-method ray/box intersection clipped to `s >= 0`.
///
/// Returns `None` on a miss (including grazing contacts of zero length).
pub fn aabb_intersect(origin: &Vec3, direction: &Vec3, aabb: &Aabb) -> Option<Interval> {
    let mut near = 0.0f64;
    let mut far = f64::INFINITY;
    for axis in 0..3 {
        let o = origin[axis];
        let d = direction[axis];
        if d == 0.0 {
            if o < aabb.min[axis] || o > aabb.max[axis] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let mut t0 = (aabb.min[axis] - o) * inv;
        let mut t1 = (aabb.max[axis] - o) * inv;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        near = near.max(t0);
        far = far.min(t1);
    }
    (near < far).then_some(Interval { near, far })
}

/// World-space ray with unit direction and its box interval, if any.
#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub bounds: Option<Interval>,
}

impl Ray {
    /// Builds a ray, normalizing `direction` and intersecting it with `aabb`.
    pub fn new(origin: Vec3, direction: Vec3, aabb: &Aabb) -> Self {
        let direction = direction.normalize();
        let bounds = aabb_intersect(&origin, &direction, aabb);
        Self {
            origin,
            direction,
            bounds,
        }
    }

    pub fn at(&self, s: f64) -> Vec3 {
        self.origin + self.direction * s
    }

    pub fn hits(&self) -> bool {
        self.bounds.is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePose {
    /// 1-based index into the full sequence.
    pub frame_index: usize,
    pub angle_rad: f64,
    pub t_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanGeometry {
    pub sod_mm: f64,
    pub sdd_mm: f64,
    pub det_cols: usize,
    pub det_rows: usize,
    pub pitch_u_mm: f64,
    pub pitch_v_mm: f64,
    pub angle_start_deg: f64,
    pub angle_range_deg: f64,
    pub num_frames_total: usize,
    pub aabb: Aabb,
}

impl ScanGeometry {
    /// Clinical acquisition constants: 750/1200 mm, 133 frames over 198
    /// degrees, 1240x960 detector at ~0.32 mm pitch.
    pub fn clinical() -> Self {
        Self {
            sod_mm: 750.0,
            sdd_mm: 1200.0,
            det_cols: 1240,
            det_rows: 960,
            pitch_u_mm: 0.3219,
            pitch_v_mm: 0.3208,
            angle_start_deg: 0.0,
            angle_range_deg: 198.0,
            num_frames_total: 133,
            aabb: Aabb::cube(220.0),
        }
    }

    /// Small-detector variant used for phantom experiments: 60 frames on a
    /// 128x128 detector whose footprint at the isocenter covers the box.
    pub fn desk() -> Self {
        Self {
            det_cols: 128,
            det_rows: 128,
            pitch_u_mm: 2.8,
            pitch_v_mm: 2.8,
            num_frames_total: 60,
            ..Self::clinical()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.sod_mm,
            self.sdd_mm,
            self.pitch_u_mm,
            self.pitch_v_mm,
            self.angle_start_deg,
            self.angle_range_deg,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("geometry contains non-finite values".into()));
        }
        if self.sod_mm <= 0.0 || self.sdd_mm <= self.sod_mm {
            return Err(Error::Config(format!(
                "require 0 < sod ({}) < sdd ({})",
                self.sod_mm, self.sdd_mm
            )));
        }
        if self.pitch_u_mm <= 0.0 || self.pitch_v_mm <= 0.0 {
            return Err(Error::Config("pixel pitch must be positive".into()));
        }
        if self.det_cols == 0 || self.det_rows == 0 {
            return Err(Error::Config("detector must have at least one pixel".into()));
        }
        if self.num_frames_total < 2 {
            return Err(Error::Config("need at least two frames".into()));
        }
        if !self.aabb.is_valid() {
            return Err(Error::Config("invalid scene box".into()));
        }
        // The box sweeps a cylinder about z; it must stay clear of both the
        // source orbit and the detector plane.
        let reach = self
            .aabb
            .corners()
            .iter()
            .map(|c| c.x.hypot(c.y))
            .fold(0.0, f64::max);
        if reach >= self.sod_mm || reach >= self.sdd_mm - self.sod_mm {
            return Err(Error::Config(format!(
                "scene box (xy reach {reach:.1} mm) intersects source orbit or detector"
            )));
        }
        Ok(())
    }

    pub fn pose_for_frame(&self, frame_index: usize) -> Result<FramePose> {
        if frame_index < 1 || frame_index > self.num_frames_total {
            bail_arg!(
                "frame index {frame_index} outside 1..={}",
                self.num_frames_total
            );
        }
        let frac = (frame_index - 1) as f64 / (self.num_frames_total - 1) as f64;
        let angle_deg = self.angle_start_deg + self.angle_range_deg * frac;
        Ok(FramePose {
            frame_index,
            angle_rad: angle_deg.to_radians(),
            t_norm: frac,
        })
    }

    /// Source position for a gantry angle.
    pub fn source_position(&self, angle_rad: f64) -> Vec3 {
        rotate_z(&Vec3::new(0.0, -self.sod_mm, 0.0), angle_rad)
    }

    /// World position of a (continuous) detector coordinate.
    pub fn detector_point(&self, angle_rad: f64, u: f64, v: f64) -> Vec3 {
        let du = (u - (self.det_cols as f64 - 1.0) / 2.0) * self.pitch_u_mm;
        let dv = (v - (self.det_rows as f64 - 1.0) / 2.0) * self.pitch_v_mm;
        rotate_z(&Vec3::new(du, self.sdd_mm - self.sod_mm, dv), angle_rad)
    }

    /// Ray from the source through detector coordinate `(u, v)`.
    pub fn ray_for_pixel(&self, pose: &FramePose, u: f64, v: f64) -> Ray {
        let origin = self.source_position(pose.angle_rad);
        let target = self.detector_point(pose.angle_rad, u, v);
        Ray::new(origin, target - origin, &self.aabb)
    }

    pub fn pixel_count(&self) -> usize {
        self.det_cols * self.det_rows
    }
}

pub fn rotate_z(p: &Vec3, angle_rad: f64) -> Vec3 {
    let (s, c) = angle_rad.sin_cos();
    Vec3::new(c * p.x - s * p.y, s * p.x + c * p.y, p.z)
}
