//! Image and surface quality metrics.
//!
//! Conventions, since absolute values depend on them:
//!
//! * PSNR uses `10 log10(R^2 / MSE)` and is capped at [`PSNR_CAP`] dB, which
//!   is also what identical images report. When not given, `R` is the
//!   target's max minus min over the whole test set.
//! * SSIM is the single-scale index with an 11x11 Gaussian window
//!   (sigma 1.5), averaged over windows that fit inside the image.
//! * Chamfer distance is half the sum of the two mean nearest-neighbour
//!   distances; Hausdorff distance is the larger of the two maxima. Both run
//!   on area-uniform surface samples, not mesh vertices.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset_io::Image;
use crate::error::{bail_arg, Result};
use crate::reconstructor::TriMesh;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.cols != b.cols || a.rows != b.rows {
        bail_arg!("image dimensions differ: {}x{} vs {}x{}", a.cols, a.rows, b.cols, b.rows);
    }
    Ok(())
}

pub fn mse(pred: &Image, target: &Image) -> Result<f64> {
    check_dims(pred, target)?;
    let sum: f64 = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(&p, &t)| (p as f64 - t as f64).powi(2))
        .sum();
    Ok(sum / pred.data.len().max(1) as f64)
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP`].
pub fn psnr(pred: &Image, target: &Image, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        bail_arg!("data range must be positive, got {data_range}");
    }
    let m = mse(pred, target)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / m).log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable "valid" Gaussian filter.
fn filter_valid(data: &[f64], cols: usize, rows: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let w = SSIM_WINDOW;
    let (oc, or) = (cols - w + 1, rows - w + 1);
    let mut horiz = vec![0.0; oc * rows];
    for r in 0..rows {
        for c in 0..oc {
            horiz[r * oc + c] = (0..w).map(|i| k[i] * data[r * cols + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oc * or];
    for r in 0..or {
        for c in 0..oc {
            out[r * oc + c] = (0..w).map(|i| k[i] * horiz[(r + i) * oc + c]).sum();
        }
    }
    out
}

/// Structural similarity index.
pub fn ssim(pred: &Image, target: &Image, data_range: f64) -> Result<f64> {
    check_dims(pred, target)?;
    if pred.cols < SSIM_WINDOW || pred.rows < SSIM_WINDOW {
        bail_arg!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            pred.cols,
            pred.rows
        );
    }
    if !(data_range > 0.0) {
        bail_arg!("data range must be positive, got {data_range}");
    }
    let (cols, rows) = (pred.cols, pred.rows);
    let x: Vec<f64> = pred.data.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = target.data.iter().map(|&v| v as f64).collect();
    let k = gaussian_kernel();
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mx = filter_valid(&x, cols, rows, &k);
    let my = filter_valid(&y, cols, rows, &k);
    let mxx = filter_valid(&sq(&x, &x), cols, rows, &k);
    let myy = filter_valid(&sq(&y, &y), cols, rows, &k);
    let mxy = filter_valid(&sq(&x, &y), cols, rows, &k);
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (a, b) = (mx[i], my[i]);
            let vx = mxx[i] - a * a;
            let vy = myy[i] - b * b;
            let cxy = mxy[i] - a * b;
            ((2.0 * a * b + c1) * (2.0 * cxy + c2)) / ((a * a + b * b + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Max minus min over all target images.
pub fn dataset_range(targets: &[Image]) -> f64 {
    let (lo, hi) = targets.iter().map(Image::min_max).fold(
        (f32::INFINITY, f32::NEG_INFINITY),
        |(lo, hi), (a, b)| (lo.min(a), hi.max(b)),
    );
    (hi - lo) as f64
}

/// Area-uniform random points on a triangle mesh.
pub fn sample_mesh_surface(mesh: &TriMesh, count: usize, seed: u64) -> Result<Vec<[f64; 3]>> {
    if mesh.is_empty() {
        bail_arg!("cannot sample an empty mesh");
    }
    mesh.validate()?;
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut acc = 0.0;
    for t in &mesh.triangles {
        acc += mesh.triangle_area(t);
        cumulative.push(acc);
    }
    if !(acc > 0.0) {
        bail_arg!("mesh has zero surface area");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let pick = rng.random::<f64>() * acc;
            let i = cumulative.partition_point(|&c| c <= pick).min(cumulative.len() - 1);
            let [a, b, c] = mesh.triangles[i].map(|v| mesh.vertices[v as usize]);
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let s = r1.sqrt();
            let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
            std::array::from_fn(|k| wa * a[k] + wb * b[k] + wc * c[k])
        })
        .collect())
}

/// Nearest-neighbour index over a fixed point set.
pub struct PointIndex {
    tree: ImmutableKdTree<f64, 3>,
}

impl PointIndex {
    pub fn new(points: &[[f64; 3]]) -> Result<Self> {
        if points.is_empty() {
            bail_arg!("cannot index an empty point set");
        }
        Ok(Self {
            tree: ImmutableKdTree::new_from_slice(points),
        })
    }

    pub fn nearest_distance(&self, q: &[f64; 3]) -> f64 {
        self.tree.nearest_one::<SquaredEuclidean>(q).distance.sqrt()
    }

    /// Distance from every query point to the indexed set.
    pub fn distances(&self, queries: &[[f64; 3]]) -> Vec<f64> {
        queries.par_iter().map(|q| self.nearest_distance(q)).collect()
    }
}

fn both_directions(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<(Vec<f64>, Vec<f64>)> {
    let ia = PointIndex::new(a)?;
    let ib = PointIndex::new(b)?;
    Ok((ib.distances(a), ia.distances(b)))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn max(v: &[f64]) -> f64 {
    v.iter().cloned().fold(0.0, f64::max)
}

/// Symmetric chamfer distance between point sets.
pub fn chamfer_points(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    let (ab, ba) = both_directions(a, b)?;
    Ok(0.5 * (mean(&ab) + mean(&ba)))
}

/// Largest distance from a point of `a` to the set `b`.
pub fn directed_hausdorff_points(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    Ok(max(&PointIndex::new(b)?.distances(a)))
}

/// Symmetric Hausdorff distance between point sets.
pub fn hausdorff_points(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    let (ab, ba) = both_directions(a, b)?;
    Ok(max(&ab).max(max(&ba)))
}

/// Chamfer distance between mesh surfaces, each sampled with `samples`
/// points from the same seed.
pub fn chamfer(a: &TriMesh, b: &TriMesh, samples: usize, seed: u64) -> Result<f64> {
    chamfer_points(&sample_mesh_surface(a, samples, seed)?, &sample_mesh_surface(b, samples, seed)?)
}

pub fn hausdorff(a: &TriMesh, b: &TriMesh, samples: usize, seed: u64) -> Result<f64> {
    hausdorff_points(&sample_mesh_surface(a, samples, seed)?, &sample_mesh_surface(b, samples, seed)?)
}

/// Per-item metric values with summary statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub columns: Vec<String>,
    pub labels: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Conventions and provenance: data range, sample counts, seeds.
    pub meta: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            ..Self::default()
        }
    }

    pub fn push(&mut self, label: impl Into<String>, values: Vec<f64>) {
        assert_eq!(values.len(), self.columns.len(), "one value per column");
        self.labels.push(label.into());
        self.rows.push(values);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.columns.iter().position(|n| n == name)?;
        Some(self.rows.iter().map(|r| r[c]).collect())
    }

    /// Mean and sample standard deviation (`N - 1`; 0 for one item).
    pub fn mean_std(&self, name: &str) -> Option<(f64, f64)> {
        mean_std(&self.column(name)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            let _ = writeln!(out, "# {k}={v}");
        }
        let _ = writeln!(out, "item,{}", self.columns.join(","));
        for (label, row) in self.labels.iter().zip(&self.rows) {
            let vals: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(out, "{label},{}", vals.join(","));
        }
        out
    }

    /// Aligned text table ending with a `mean±std` row.
    pub fn to_table(&self) -> String {
        let mut cells: Vec<Vec<String>> = vec![std::iter::once("item".to_string()).chain(self.columns.clone()).collect()];
        for (label, row) in self.labels.iter().zip(&self.rows) {
            cells.push(std::iter::once(label.clone()).chain(row.iter().map(|v| format!("{v:.4}"))).collect());
        }
        let summary = self.columns.iter().map(|c| match self.mean_std(c) {
            Some((m, s)) => format!("{m:.2}±{s:.2}"),
            None => "-".into(),
        });
        cells.push(std::iter::once("mean±std".to_string()).chain(summary).collect());
        let widths: Vec<usize> = (0..cells[0].len())
            .map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(s, &w)| format!("{s:>w$}"))
                .collect();
            let _ = writeln!(out, "{}", line.join("  "));
        }
        out
    }
}

pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let m = mean(values);
    let n = values.len();
    let var = if n > 1 {
        values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Some((m, var.sqrt()))
}

/// PSNR and SSIM for paired images. `data_range` defaults to the targets'
/// overall max minus min.
pub fn evaluate_images(preds: &[Image], targets: &[Image], labels: &[String], data_range: Option<f64>) -> Result<MetricReport> {
    if preds.len() != targets.len() || preds.len() != labels.len() {
        bail_arg!("need one prediction and one label per target image");
    }
    let range = data_range.unwrap_or_else(|| dataset_range(targets));
    let mut report = MetricReport::new(&["psnr_db", "ssim"]);
    report.meta.insert("data_range".into(), format!("{range}"));
    report.meta.insert(
        "data_range_rule".into(),
        if data_range.is_some() { "given" } else { "target max-min over the test set" }.into(),
    );
    report.meta.insert("views".into(), preds.len().to_string());
    for ((p, t), l) in preds.iter().zip(targets).zip(labels) {
        report.push(l.clone(), vec![psnr(p, t, range)?, ssim(p, t, range)?]);
    }
    Ok(report)
}
