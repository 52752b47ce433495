//! Volume extraction, timestamp averaging and isosurface meshing.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::dataset_io::{read_raw, write_pgm, write_raw, Image};
use crate::error::{bail_arg, Error, Result};
use crate::fields::{FieldSet, PointCache};
use crate::geometry::{Aabb, Vec3};
use crate::real::Real;

/// Regular grid of voxels. Voxel `(i, j, k)` has its center at
/// `origin + (i + 0.5, j + 0.5, k + 0.5) * voxel_size`; linear indices run
/// with `i` fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub origin: [f64; 3],
}

impl Lattice {
    pub fn new(dims: [usize; 3], voxel_size: f64, origin: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            bail_arg!("lattice dimensions must be positive, got {dims:?}");
        }
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            bail_arg!("voxel size must be positive, got {voxel_size}");
        }
        Ok(Self { dims, voxel_size, origin })
    }

    /// Isotropic lattice over `aabb` with `n` voxels along its longest side.
    pub fn covering(aabb: &Aabb, n: usize) -> Result<Self> {
        let ext = aabb.extent();
        let longest = ext.iter().cloned().fold(0.0, f64::max);
        if n == 0 || longest <= 0.0 {
            bail_arg!("cannot cover box {aabb:?} with {n} voxels");
        }
        let voxel = longest / n as f64;
        let dims = ext.map(|e| ((e / voxel) - 1e-9).ceil().max(1.0) as usize);
        Self::new(dims, voxel, aabb.min)
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let h = self.voxel_size;
        Vec3::new(
            self.origin[0] + (i as f64 + 0.5) * h,
            self.origin[1] + (j as f64 + 0.5) * h,
            self.origin[2] + (k as f64 + 0.5) * h,
        )
    }

    #[inline]
    pub fn center_of(&self, index: usize) -> Vec3 {
        let [nx, ny, _] = self.dims;
        self.center(index % nx, (index / nx) % ny, index / (nx * ny))
    }

    /// Voxel centers in linear-index order.
    pub fn centers_par(&self) -> impl IndexedParallelIterator<Item = Vec3> + '_ {
        (0..self.len()).into_par_iter().map(move |i| self.center_of(i))
    }
}

/// Scalar volume on a lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeImage {
    pub lattice: Lattice,
    pub values: Vec<f32>,
    pub kind: String,
    pub timestamp: Option<f64>,
}

impl VolumeImage {
    pub fn new(lattice: Lattice, values: Vec<f32>, kind: impl Into<String>, timestamp: Option<f64>) -> Self {
        assert_eq!(values.len(), lattice.len(), "volume value count must match lattice");
        Self {
            lattice,
            values,
            kind: kind.into(),
            timestamp,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[self.lattice.index(i, j, k)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.lattice.len() {
            return Err(Error::Data("volume value count does not match lattice".into()));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite voxel value at index {i}")));
        }
        Ok(())
    }

    /// Value at quantile `q` in [0, 1] (nearest rank).
    pub fn percentile(&self, q: f64) -> f32 {
        let mut v = self.values.clone();
        v.sort_unstable_by(f32::total_cmp);
        let idx = ((q.clamp(0.0, 1.0) * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
        v[idx]
    }

    /// Maximum-intensity projection along z, for previews.
    pub fn mip_z(&self) -> Image {
        let [nx, ny, nz] = self.lattice.dims;
        let mut img = Image::zeros(nx, ny);
        for j in 0..ny {
            for i in 0..nx {
                let m = (0..nz).map(|k| self.get(i, j, k)).fold(f32::NEG_INFINITY, f32::max);
                // flip so +y is up in the preview
                img.set(i, ny - 1 - j, m);
            }
        }
        img
    }

    /// Mean absolute voxel difference.
    pub fn mean_abs_diff(&self, other: &VolumeImage) -> Result<f64> {
        if self.lattice != other.lattice {
            bail_arg!("volumes live on different lattices");
        }
        let sum: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .sum();
        Ok(sum / self.values.len() as f64)
    }
}

/// The volumes that can be read out of a trained field set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeKind {
    MuC,
    P,
    MuS,
    MuD,
    StaticComponent,
    DynamicComponent,
}

impl VolumeKind {
    pub const ALL: [VolumeKind; 6] = [
        VolumeKind::MuC,
        VolumeKind::P,
        VolumeKind::MuS,
        VolumeKind::MuD,
        VolumeKind::StaticComponent,
        VolumeKind::DynamicComponent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VolumeKind::MuC => "mu_c",
            VolumeKind::P => "p",
            VolumeKind::MuS => "mu_s",
            VolumeKind::MuD => "mu_d",
            VolumeKind::StaticComponent => "static_component",
            VolumeKind::DynamicComponent => "dynamic_component",
        }
    }

    pub fn is_time_dependent(self) -> bool {
        matches!(self, VolumeKind::MuC | VolumeKind::MuD | VolumeKind::DynamicComponent)
    }
}

impl std::str::FromStr for VolumeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VolumeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown volume kind '{s}'")))
    }
}

fn pick<T: Real>(kind: VolumeKind, c: &PointCache<T>) -> T {
    match kind {
        VolumeKind::MuC => c.mu_c(),
        VolumeKind::P => c.p,
        VolumeKind::MuS => c.mu_s,
        VolumeKind::MuD => c.mu_d,
        VolumeKind::StaticComponent => c.static_part(),
        VolumeKind::DynamicComponent => c.dynamic_part(),
    }
}

/// Samples one field quantity at every voxel center.
///
/// Time-independent kinds ignore `t`; time-dependent kinds require it.
pub fn extract_volume<T: Real>(
    fields: &FieldSet<T>,
    lattice: &Lattice,
    aabb: &Aabb,
    kind: VolumeKind,
    t: Option<f64>,
) -> Result<VolumeImage> {
    let time = match (kind.is_time_dependent(), t) {
        (true, None) => bail_arg!("volume kind {} needs a timestamp", kind.name()),
        (_, Some(t)) if !(0.0..=1.0).contains(&t) => bail_arg!("timestamp {t} outside [0, 1]"),
        (_, t) => t,
    };
    let values = lattice
        .centers_par()
        .map_init(
            || PointCache::new(fields),
            |cache, x| {
                fields.query_mu_c(aabb.to_unit(&x), time.unwrap_or(0.0), cache);
                pick(kind, cache).as_f64() as f32
            },
        )
        .collect();
    let stamp = if kind.is_time_dependent() { time } else { None };
    Ok(VolumeImage::new(lattice.clone(), values, kind.name(), stamp))
}

/// Mean of `mu_c` (or `mu_d`) over the given timestamps.
///
/// Timestamps are sorted first and each voxel accumulates in `f64`, so the
/// result is independent of the order they are passed in.
pub fn average_volume<T: Real>(
    fields: &FieldSet<T>,
    lattice: &Lattice,
    aabb: &Aabb,
    timestamps: &[f64],
    kind: VolumeKind,
) -> Result<VolumeImage> {
    if timestamps.is_empty() {
        bail_arg!("average_volume needs at least one timestamp");
    }
    if !matches!(kind, VolumeKind::MuC | VolumeKind::MuD | VolumeKind::DynamicComponent) {
        bail_arg!("only time-dependent kinds can be averaged, got {}", kind.name());
    }
    let mut ts = timestamps.to_vec();
    ts.sort_unstable_by(f64::total_cmp);
    if ts[0] < 0.0 || ts[ts.len() - 1] > 1.0 {
        bail_arg!("timestamps must lie in [0, 1]");
    }
    let n = ts.len() as f64;
    let values = lattice
        .centers_par()
        .map_init(
            || PointCache::new(fields),
            |cache, x| {
                let u = aabb.to_unit(&x);
                fields.query_spatial(u, cache);
                let sum: f64 = ts
                    .iter()
                    .map(|&t| {
                        fields.query_temporal(u, t, cache);
                        pick(kind, cache).as_f64()
                    })
                    .sum();
                (sum / n) as f32
            },
        )
        .collect();
    Ok(VolumeImage::new(lattice.clone(), values, format!("mean_{}", kind.name()), None))
}

/// Averages precomputed volumes on one lattice, sorted by timestamp.
pub fn average_of(volumes: &[VolumeImage]) -> Result<VolumeImage> {
    let Some(first) = volumes.first() else {
        bail_arg!("nothing to average");
    };
    if volumes.iter().any(|v| v.lattice != first.lattice) {
        bail_arg!("volumes live on different lattices");
    }
    let mut order: Vec<&VolumeImage> = volumes.iter().collect();
    order.sort_by(|a, b| a.timestamp.unwrap_or(0.0).total_cmp(&b.timestamp.unwrap_or(0.0)));
    let n = volumes.len() as f64;
    let values = (0..first.values.len())
        .into_par_iter()
        .map(|i| (order.iter().map(|v| v.values[i] as f64).sum::<f64>() / n) as f32)
        .collect();
    Ok(VolumeImage::new(first.lattice.clone(), values, format!("mean_{}", first.kind), None))
}

/// Default vessel threshold: half the 99.9th percentile.
pub fn default_iso_level(volume: &VolumeImage) -> f64 {
    0.5 * volume.percentile(0.999) as f64
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::Data(format!("triangle {t:?} references a missing vertex")));
        }
        Ok(())
    }

    pub fn triangle_area(&self, t: &[u32; 3]) -> f64 {
        let [a, b, c] = t.map(|i| Vec3::from(self.vertices[i as usize]));
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|t| self.triangle_area(t)).sum()
    }

    /// Volume enclosed by a closed, outward-oriented mesh.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| Vec3::from(self.vertices[i as usize]));
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    fn edge_uses(&self) -> HashMap<(u32, u32), usize> {
        let mut edges = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        edges
    }

    /// `V - E + F` over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &i in t {
                used[i as usize] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edge_uses().len() as i64 + self.triangles.len() as i64
    }

    /// Every edge shared by exactly two triangles.
    pub fn is_closed(&self) -> bool {
        self.edge_uses().values().all(|&n| n == 2)
    }

    pub fn transformed(&self, f: impl Fn(Vec3) -> Vec3) -> TriMesh {
        TriMesh {
            vertices: self
                .vertices
                .iter()
                .map(|v| {
                    let p = f(Vec3::from(*v));
                    [p.x, p.y, p.z]
                })
                .collect(),
            triangles: self.triangles.clone(),
        }
    }
}

/// Cube corner `c` sits at offset `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
const fn corner_offset(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// The 12 cube edges as `(low corner, axis)`; the high corner is
/// `low | (1 << axis)`.
fn cube_edges() -> [(usize, usize); 12] {
    let mut out = [(0, 0); 12];
    let mut n = 0;
    for axis in 0..3 {
        for c in 0..8 {
            if c & (1 << axis) == 0 {
                out[n] = (c, axis);
                n += 1;
            }
        }
    }
    out
}

fn edge_between(a: usize, b: usize) -> usize {
    let (lo, hi) = (a.min(b), a.max(b));
    let axis = (hi ^ lo).trailing_zeros() as usize;
    cube_edges()
        .iter()
        .position(|&e| e == (lo, axis))
        .expect("corners share an edge")
}

/// Oriented polygon loops (edge indices) for each of the 256 corner sign
/// cases. Generated rather than tabulated: on every face the crossings are
/// paired so that inside corners stay separated, which depends only on the
/// face and so agrees between neighbouring cubes. Each loop is then oriented
/// so its normal points from inside corners toward outside ones.
fn case_table() -> &'static Vec<Vec<Vec<u8>>> {
    static TABLE: OnceLock<Vec<Vec<Vec<u8>>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..256).map(build_case).collect())
}

fn build_case(case: usize) -> Vec<Vec<u8>> {
    let inside = |c: usize| case & (1 << c) != 0;
    let edges = cube_edges();
    let mut links: Vec<Vec<usize>> = vec![Vec::new(); 12];
    for axis in 0..3 {
        for side in 0..2 {
            // face corners in cyclic order
            let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
            let base = side << axis;
            let ring = [base, base | (1 << a1), base | (1 << a1) | (1 << a2), base | (1 << a2)];
            let ring_edge = |k: usize| edge_between(ring[k], ring[(k + 1) % 4]);
            let crossed: Vec<usize> = (0..4).filter(|&k| inside(ring[k]) != inside(ring[(k + 1) % 4])).collect();
            let mut pair = |x: usize, y: usize| {
                links[x].push(y);
                links[y].push(x);
            };
            match crossed.len() {
                0 => {}
                2 => pair(ring_edge(crossed[0]), ring_edge(crossed[1])),
                4 => {
                    for k in 0..4 {
                        if inside(ring[k]) {
                            pair(ring_edge((k + 3) % 4), ring_edge(k));
                        }
                    }
                }
                _ => unreachable!("a face has an even number of crossings"),
            }
        }
    }
    let pos = |c: usize| {
        let o = corner_offset(c);
        Vec3::new(o[0] as f64, o[1] as f64, o[2] as f64)
    };
    let mid = |e: usize| {
        let (lo, axis) = edges[e];
        (pos(lo) + pos(lo | (1 << axis))) * 0.5
    };
    let mut seen = [false; 12];
    let mut loops = Vec::new();
    for start in 0..12 {
        if seen[start] || links[start].is_empty() {
            continue;
        }
        let mut ring = vec![start];
        seen[start] = true;
        let (mut prev, mut cur) = (start, links[start][0]);
        while cur != start {
            ring.push(cur);
            seen[cur] = true;
            let next = if links[cur][0] == prev { links[cur][1] } else { links[cur][0] };
            prev = cur;
            cur = next;
        }
        let mut newell = Vec3::zeros();
        let mut outward = Vec3::zeros();
        for (k, &e) in ring.iter().enumerate() {
            let (p, q) = (mid(e), mid(ring[(k + 1) % ring.len()]));
            newell += p.cross(&q);
            let (lo, axis) = edges[e];
            let hi = lo | (1 << axis);
            outward += if inside(lo) { pos(hi) - pos(lo) } else { pos(lo) - pos(hi) };
        }
        if newell.dot(&outward) < 0.0 {
            ring.reverse();
        }
        loops.push(ring.into_iter().map(|e| e as u8).collect());
    }
    loops
}

/// Extracts the `value > iso` boundary as a triangle mesh in world mm.
///
/// Grid nodes are voxel centers. Vertices on shared lattice edges are shared,
/// so the mesh is closed wherever the surface stays inside the volume.
/// Returns an empty mesh when `iso` is not strictly inside the value range.
pub fn marching_cubes(volume: &VolumeImage, iso: f64) -> TriMesh {
    let lat = &volume.lattice;
    let [nx, ny, nz] = lat.dims;
    let (lo, hi) = volume.min_max();
    if nx < 2 || ny < 2 || nz < 2 || !(iso > lo as f64 && iso < hi as f64) {
        return TriMesh::default();
    }
    let table = case_table();
    let edges = cube_edges();
    // key = linear index of the edge's low node * 3 + axis
    let slabs: Vec<(Vec<(usize, [f64; 3])>, Vec<[usize; 3]>)> = (0..nz - 1)
        .into_par_iter()
        .map(|k| {
            let mut verts = Vec::new();
            let mut tris = Vec::new();
            let mut local: HashMap<usize, ()> = HashMap::new();
            for j in 0..ny - 1 {
                for i in 0..nx - 1 {
                    let node = |c: usize| {
                        let o = corner_offset(c);
                        (i + o[0], j + o[1], k + o[2])
                    };
                    let vals: [f64; 8] = std::array::from_fn(|c| {
                        let (a, b, d) = node(c);
                        volume.get(a, b, d) as f64
                    });
                    let case = (0..8).filter(|&c| vals[c] > iso).fold(0, |m, c| m | (1 << c));
                    if case == 0 || case == 255 {
                        continue;
                    }
                    let mut key_of = [0usize; 12];
                    for loop_ in &table[case] {
                        for &e in loop_ {
                            let (c0, axis) = edges[e as usize];
                            let (a, b, d) = node(c0);
                            let key = lat.index(a, b, d) * 3 + axis;
                            key_of[e as usize] = key;
                            if local.insert(key, ()).is_none() {
                                let (v0, v1) = (vals[c0], vals[c0 | (1 << axis)]);
                                let s = ((iso - v0) / (v1 - v0)).clamp(0.0, 1.0);
                                let mut p = lat.center(a, b, d);
                                p[axis] += s * lat.voxel_size;
                                verts.push((key, [p.x, p.y, p.z]));
                            }
                        }
                        for w in 1..loop_.len() - 1 {
                            tris.push([
                                key_of[loop_[0] as usize],
                                key_of[loop_[w] as usize],
                                key_of[loop_[w + 1] as usize],
                            ]);
                        }
                    }
                }
            }
            (verts, tris)
        })
        .collect();

    let mut mesh = TriMesh::default();
    let mut index: HashMap<usize, u32> = HashMap::new();
    let mut by_position: HashMap<[i64; 3], u32> = HashMap::new();
    for (verts, _) in &slabs {
        for &(key, p) in verts {
            if index.contains_key(&key) {
                continue;
            }
            let q = p.map(|c| (c / 1e-6).round() as i64);
            let id = *by_position.entry(q).or_insert_with(|| {
                mesh.vertices.push(p);
                (mesh.vertices.len() - 1) as u32
            });
            index.insert(key, id);
        }
    }
    for (_, tris) in slabs {
        for t in tris {
            let tri = t.map(|key| index[&key]);
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                continue;
            }
            if mesh.triangle_area(&tri) <= 1e-12 {
                continue;
            }
            mesh.triangles.push(tri);
        }
    }
    mesh
}

/// Writes a volume as a raw payload with shape `[nz, ny, nx]`.
pub fn save_volume(path: &Path, volume: &VolumeImage) -> Result<()> {
    volume.validate()?;
    let [nx, ny, nz] = volume.lattice.dims;
    let mut meta = Map::new();
    meta.insert("kind".into(), json!(volume.kind));
    meta.insert("timestamp".into(), json!(volume.timestamp));
    meta.insert("voxel_size_mm".into(), json!(volume.lattice.voxel_size));
    meta.insert("origin_mm".into(), json!(volume.lattice.origin));
    write_raw(path, &[nz, ny, nx], meta, &volume.values)?;
    write_pgm(&path.with_extension("mip.pgm"), &volume.mip_z())
}

pub fn load_volume(path: &Path) -> Result<VolumeImage> {
    let (shape, meta, values) = read_raw(path)?;
    let bad = |what: &str| Error::Data(format!("{}: volume header {what}", path.display()));
    let [nz, ny, nx] = shape[..] else {
        return Err(bad("shape is not 3D"));
    };
    let voxel = meta.get("voxel_size_mm").and_then(Value::as_f64).ok_or_else(|| bad("lacks voxel_size_mm"))?;
    let origin: [f64; 3] = meta
        .get("origin_mm")
        .cloned()
        .and_then(|v| serde_json::from_value(v).ok())
        .ok_or_else(|| bad("lacks origin_mm"))?;
    let kind = meta.get("kind").and_then(Value::as_str).unwrap_or("unknown").to_string();
    let timestamp = meta.get("timestamp").and_then(Value::as_f64);
    let lattice = Lattice::new([nx, ny, nz], voxel, origin).map_err(|e| bad(&e.to_string()))?;
    Ok(VolumeImage::new(lattice, values, kind, timestamp))
}

/// ASCII PLY with `comment key=value` lines for metadata.
pub fn write_ply(path: &Path, mesh: &TriMesh, comments: &[(String, String)]) -> Result<()> {
    mesh.validate()?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "ply\nformat ascii 1.0").map_err(io)?;
    for (k, v) in comments {
        writeln!(w, "comment {k}={v}").map_err(io)?;
    }
    writeln!(
        w,
        "element vertex {}\nproperty double x\nproperty double y\nproperty double z\nelement face {}\nproperty list uchar int vertex_indices\nend_header",
        mesh.vertices.len(),
        mesh.triangles.len()
    )
    .map_err(io)?;
    for v in &mesh.vertices {
        writeln!(w, "{} {} {}", v[0], v[1], v[2]).map_err(io)?;
    }
    for t in &mesh.triangles {
        writeln!(w, "3 {} {} {}", t[0], t[1], t[2]).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads the ASCII PLY subset written by [`write_ply`].
pub fn read_ply(path: &Path) -> Result<TriMesh> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Data(format!("{}: {msg}", path.display()));
    let mut lines = BufReader::new(file).lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| bad("unexpected end of file".into()))?
            .map_err(|e| Error::io(path, e))
    };
    if next()?.trim() != "ply" {
        return Err(bad("missing ply magic".into()));
    }
    let (mut nv, mut nf) = (None, None);
    loop {
        let line = next()?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", f, _] if *f != "ascii" => return Err(bad(format!("unsupported format {f}"))),
            ["element", "vertex", n] => nv = n.parse().ok(),
            ["element", "face", n] => nf = n.parse().ok(),
            ["end_header"] => break,
            _ => {}
        }
    }
    let (nv, nf): (usize, usize) = (nv.ok_or_else(|| bad("no vertex count".into()))?, nf.ok_or_else(|| bad("no face count".into()))?);
    let mut mesh = TriMesh::default();
    for _ in 0..nv {
        let line = next()?;
        let xs: Vec<f64> = line.split_whitespace().take(3).map(str::parse).collect::<std::result::Result<_, _>>().map_err(|e| bad(format!("{e}")))?;
        if xs.len() != 3 {
            return Err(bad(format!("bad vertex line '{line}'")));
        }
        mesh.vertices.push([xs[0], xs[1], xs[2]]);
    }
    for _ in 0..nf {
        let line = next()?;
        let xs: Vec<u32> = line.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|e| bad(format!("{e}")))?;
        if xs.len() != 4 || xs[0] != 3 {
            return Err(bad(format!("only triangles are supported, got '{line}'")));
        }
        mesh.triangles.push([xs[1], xs[2], xs[3]]);
    }
    mesh.validate()?;
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{CompositionMode, FieldSetConfig, ParamBlock};
    use crate::hash_encoding::HashGridConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn sphere_volume(n: usize, r: f64) -> VolumeImage {
        let lat = Lattice::covering(&Aabb::cube(2.0), n).unwrap();
        let values = lat.centers_par().map(|x| (r - x.norm()) as f32).collect();
        VolumeImage::new(lat, values, "sdf", None)
    }

    #[test]
    fn case_table_is_consistent() {
        let table = case_table();
        assert!(table[0].is_empty() && table[255].is_empty());
        for case in 1..255usize {
            let crossed = cube_edges()
                .iter()
                .filter(|&&(lo, axis)| ((case >> lo) & 1) != ((case >> (lo | (1 << axis))) & 1))
                .count();
            let used: usize = table[case].iter().map(|l| l.len()).sum();
            assert_eq!(used, crossed, "case {case}");
        }
        assert_eq!(table[1].len(), 1);
        assert_eq!(table[1][0].len(), 3);
    }

    #[test]
    fn uniform_volume_gives_empty_mesh() {
        let lat = Lattice::covering(&Aabb::cube(1.0), 8).unwrap();
        let v = VolumeImage::new(lat.clone(), vec![0.2; lat.len()], "c", None);
        assert!(marching_cubes(&v, 0.5).is_empty());
        assert!(marching_cubes(&v, 0.2).is_empty());
    }

    #[test]
    fn sphere_mesh_is_closed_and_accurate() {
        let r = 0.6;
        let v = sphere_volume(64, r);
        let mesh = marching_cubes(&v, 0.0);
        mesh.validate().unwrap();
        assert!(mesh.is_closed());
        assert_eq!(mesh.euler_characteristic(), 2);
        let h = v.lattice.voxel_size;
        for p in &mesh.vertices {
            assert!((Vec3::from(*p).norm() - r).abs() <= h);
        }
        let vol = mesh.signed_volume();
        assert!((vol - 4.0 / 3.0 * PI * r.powi(3)).abs() < 0.02 * vol, "{vol}");
    }

    #[test]
    fn sphere_area_at_128() {
        let r = 0.7;
        let mesh = marching_cubes(&sphere_volume(128, r), 0.0);
        let exact = 4.0 * PI * r * r;
        assert!((mesh.area() - exact).abs() < 0.03 * exact, "{} vs {exact}", mesh.area());
    }

    #[test]
    fn noisy_field_stays_closed() {
        let lat = Lattice::covering(&Aabb::cube(1.0), 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut values: Vec<f32> = (0..lat.len()).map(|_| rng.random::<f32>()).collect();
        // zero the border so the surface cannot leave the volume
        let [nx, ny, nz] = lat.dims;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    if i == 0 || j == 0 || k == 0 || i == nx - 1 || j == ny - 1 || k == nz - 1 {
                        values[lat.index(i, j, k)] = 0.0;
                    }
                }
            }
        }
        let mesh = marching_cubes(&VolumeImage::new(lat, values, "noise", None), 0.5);
        assert!(!mesh.is_empty());
        assert!(mesh.is_closed());
        assert!(mesh.signed_volume() > 0.0);
    }

    #[test]
    fn vertices_lie_on_their_edges() {
        let v = sphere_volume(16, 0.5);
        let mesh = marching_cubes(&v, 0.0);
        let h = v.lattice.voxel_size;
        for p in &mesh.vertices {
            let g: Vec<f64> = (0..3).map(|a| (p[a] - v.lattice.origin[a]) / h - 0.5).collect();
            let off_grid = g.iter().filter(|c| (*c - c.round()).abs() > 1e-9).count();
            assert!(off_grid <= 1, "{p:?}");
        }
    }

    fn tiny_fields() -> FieldSet<f32> {
        let g = |dims, base| HashGridConfig {
            dims,
            levels: 2,
            feat_dim: 2,
            log2_table_size: 8,
            base_res: base,
            growth: 1.5,
        };
        let cfg = FieldSetConfig {
            spatial_grid: g(3, 4),
            temporal_grid: g(4, 2),
            hidden_dim: 8,
            num_layers: 3,
            decoder_bias: true,
            mode: CompositionMode::Guided,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut f = FieldSet::new(cfg, &mut rng).unwrap();
        for b in ParamBlock::ALL {
            for v in f.block_mut(b) {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        for field in [&mut f.static_field, &mut f.dynamic_field] {
            let bi = field.mlp.bias_index(2, 0);
            field.mlp.params_mut()[bi] = 0.5;
        }
        f
    }

    #[test]
    fn extraction_kinds_are_consistent() {
        let f = tiny_fields();
        let aabb = Aabb::cube(10.0);
        let lat = Lattice::covering(&aabb, 12).unwrap();
        let at = |k, t| extract_volume(&f, &lat, &aabb, k, t).unwrap();
        let sum = at(VolumeKind::StaticComponent, None);
        let dync = at(VolumeKind::DynamicComponent, Some(0.4));
        let full = at(VolumeKind::MuC, Some(0.4));
        for i in 0..lat.len() {
            assert!((sum.values[i] + dync.values[i] - full.values[i]).abs() <= 1e-6);
        }
        assert_eq!(at(VolumeKind::MuS, Some(0.0)), at(VolumeKind::MuS, Some(1.0)));
        assert!(extract_volume(&f, &lat, &aabb, VolumeKind::MuC, None).is_err());
        assert_eq!(at(VolumeKind::P, None), at(VolumeKind::P, None));

        let zero = FieldSet::<f32>::zeros(f.config().clone()).unwrap();
        let p = extract_volume(&zero, &lat, &aabb, VolumeKind::P, None).unwrap();
        assert!(p.values.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn average_is_order_invariant() {
        let f = tiny_fields();
        let aabb = Aabb::cube(10.0);
        let lat = Lattice::covering(&aabb, 8).unwrap();
        let a = average_volume(&f, &lat, &aabb, &[0.1, 0.5, 0.9, 0.3], VolumeKind::MuC).unwrap();
        let b = average_volume(&f, &lat, &aabb, &[0.9, 0.3, 0.1, 0.5], VolumeKind::MuC).unwrap();
        assert_eq!(a, b);
        let one = average_volume(&f, &lat, &aabb, &[0.3], VolumeKind::MuC).unwrap();
        assert_eq!(one.values, extract_volume(&f, &lat, &aabb, VolumeKind::MuC, Some(0.3)).unwrap().values);
    }

    #[test]
    fn average_of_two_constant_volumes() {
        let lat = Lattice::covering(&Aabb::cube(1.0), 2).unwrap();
        let one = VolumeImage::new(lat.clone(), vec![1.0; 8], "x", Some(0.0));
        let three = VolumeImage::new(lat, vec![3.0; 8], "x", Some(1.0));
        assert!(average_of(&[three, one]).unwrap().values.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn volume_and_mesh_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = sphere_volume(10, 0.5);
        let path = dir.path().join("v.f32");
        save_volume(&path, &v).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.values, v.values);
        assert_eq!(back.lattice, v.lattice);
        let mesh = marching_cubes(&v, 0.0);
        let ply = dir.path().join("m.ply");
        write_ply(&ply, &mesh, &[("iso_level".into(), "0".into())]).unwrap();
        assert_eq!(read_ply(&ply).unwrap(), mesh);
    }

    #[test]
    fn iso_rule_and_percentile() {
        let lat = Lattice::covering(&Aabb::cube(1.0), 10).unwrap();
        let values = (0..1000).map(|i| i as f32).collect();
        let v = VolumeImage::new(lat, values, "ramp", None);
        assert_eq!(v.percentile(0.999), 998.0);
        assert_eq!(default_iso_level(&v), 499.0);
    }
}
