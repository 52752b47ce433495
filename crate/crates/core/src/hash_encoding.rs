//! Multi-resolution hash-grid encoding for 3D `(x)` and 4D `(x, t)` inputs.
//!
//! Each level is a lattice of `N_l + 1` vertices per axis over `[0,1]^dims`.
//! Vertices index a trainable table of `F`-dimensional features: row-major
//! (x fastest) while the lattice fits in the table, spatial hash above that.
//! A query interpolates the `2^dims` surrounding rows multilinearly per level
//! and concatenates the levels. Levels at or above `active_levels` output
//! zeros and receive no gradient.
//!
//! Encoding is split into [`HashGrid::stencil`] (corner rows and weights,
//! which depend only on the query and the grid shape) and
//! [`HashGrid::gather`] / [`HashGrid::scatter`], so two grids with the same
//! configuration can share one stencil.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Error, Result};
use crate::real::{axpy, Real};

/// Per-axis hash multipliers; only the first `dims` are used.
pub const HASH_PRIMES: [u32; 4] = [1, 2_654_435_761, 805_459_861, 3_674_653_429];

/// Half-width of the uniform table initialization.
pub const INIT_SCALE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub dims: usize,
    pub levels: usize,
    pub feat_dim: usize,
    pub log2_table_size: u32,
    pub base_res: u32,
    pub growth: f64,
}

impl HashGridConfig {
    /// 3D encoder used for the static and probability fields.
    pub fn spatial() -> Self {
        Self {
            dims: 3,
            levels: 12,
            feat_dim: 8,
            log2_table_size: 19,
            base_res: 8,
            growth: 1.45,
        }
    }

    /// 4D encoder used for the dynamic field.
    pub fn temporal() -> Self {
        Self {
            dims: 4,
            base_res: 2,
            growth: 1.4,
            ..Self::spatial()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dims == 3 || self.dims == 4) {
            return Err(Error::Config(format!("hash grid dims must be 3 or 4, got {}", self.dims)));
        }
        if self.levels < 1 || self.feat_dim < 1 || self.base_res < 1 {
            return Err(Error::Config("hash grid needs levels, feat_dim, base_res >= 1".into()));
        }
        if !(1..=30).contains(&self.log2_table_size) {
            return Err(Error::Config("log2_table_size must be in 1..=30".into()));
        }
        if !(self.growth > 1.0) || !self.growth.is_finite() {
            return Err(Error::Config("growth factor must exceed 1".into()));
        }
        Ok(())
    }

    pub fn table_size(&self) -> usize {
        1usize << self.log2_table_size
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.feat_dim
    }

    pub fn corners(&self) -> usize {
        1 << self.dims
    }

    /// `floor(N_min * b^l)`.
    pub fn level_resolution(&self, level: usize) -> u32 {
        (self.base_res as f64 * self.growth.powi(level as i32)).floor() as u32
    }

    /// Whether the level's full lattice fits in the table.
    pub fn level_is_dense(&self, level: usize) -> bool {
        let side = self.level_resolution(level) as f64 + 1.0;
        side.powi(self.dims as i32) <= self.table_size() as f64
    }

    /// Rows allocated for a level.
    pub fn level_rows(&self, level: usize) -> usize {
        if self.level_is_dense(level) {
            (self.level_resolution(level) as usize + 1).pow(self.dims as u32)
        } else {
            self.table_size()
        }
    }
}

pub fn level_resolution(config: &HashGridConfig, level: usize) -> u32 {
    config.level_resolution(level)
}

/// Table row of an integer lattice vertex (level-local, before offsets).
pub fn cell_index(config: &HashGridConfig, level: usize, coords: &[u32]) -> usize {
    debug_assert_eq!(coords.len(), config.dims);
    if config.level_is_dense(level) {
        let side = config.level_resolution(level) as usize + 1;
        coords.iter().rev().fold(0usize, |acc, &c| acc * side + c as usize)
    } else {
        let h = coords
            .iter()
            .zip(HASH_PRIMES)
            .fold(0u32, |acc, (&c, p)| acc ^ c.wrapping_mul(p));
        (h as usize) & (config.table_size() - 1)
    }
}

/// Coarse-to-fine unlocking: `initial_levels` active at iteration 0, one more
/// every `unlock_every` iterations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSchedule {
    pub initial_levels: usize,
    pub unlock_every: u64,
}

impl Default for LevelSchedule {
    fn default() -> Self {
        Self {
            initial_levels: 4,
            unlock_every: 2500,
        }
    }
}

impl LevelSchedule {
    pub fn active_at(&self, iteration: u64, levels: usize) -> usize {
        let unlocked = iteration / self.unlock_every.max(1);
        let n = (self.initial_levels as u64).saturating_add(unlocked);
        (n.min(levels as u64) as usize).max(1)
    }

    /// First iteration at which `level` (0-based) is active.
    pub fn unlock_iteration(&self, level: usize) -> u64 {
        if level < self.initial_levels {
            0
        } else {
            (level - self.initial_levels + 1) as u64 * self.unlock_every
        }
    }
}

/// Corner rows and interpolation weights of one query.
#[derive(Clone, Debug)]
pub struct Stencil<T> {
    corners: usize,
    active: usize,
    rows: Vec<u32>,
    weights: Vec<T>,
}

impl<T: Real> Stencil<T> {
    pub fn new(config: &HashGridConfig) -> Self {
        let n = config.levels * config.corners();
        Self {
            corners: config.corners(),
            active: 0,
            rows: vec![0; n],
            weights: vec![T::zero(); n],
        }
    }

    pub fn active_levels(&self) -> usize {
        self.active
    }

    /// Global table rows touched at `level`.
    pub fn level_rows(&self, level: usize) -> &[u32] {
        &self.rows[level * self.corners..(level + 1) * self.corners]
    }

    pub fn level_weights(&self, level: usize) -> &[T] {
        &self.weights[level * self.corners..(level + 1) * self.corners]
    }
}

#[derive(Clone, Debug)]
pub struct HashGrid<T> {
    config: HashGridConfig,
    tables: Vec<T>,
    /// Row offset of each level; `level_offsets[levels]` is the total.
    level_offsets: Vec<usize>,
    resolutions: Vec<u32>,
    dense: Vec<bool>,
    active_levels: usize,
}

impl<T: Real> HashGrid<T> {
    /// Zero-filled tables with every level active.
    pub fn zeros(config: HashGridConfig) -> Result<Self> {
        config.validate()?;
        let mut level_offsets = Vec::with_capacity(config.levels + 1);
        let mut total = 0usize;
        for l in 0..config.levels {
            level_offsets.push(total);
            total += config.level_rows(l);
        }
        level_offsets.push(total);
        let resolutions = (0..config.levels).map(|l| config.level_resolution(l)).collect();
        let dense = (0..config.levels).map(|l| config.level_is_dense(l)).collect();
        Ok(Self {
            tables: vec![T::zero(); total * config.feat_dim],
            active_levels: config.levels,
            config,
            level_offsets,
            resolutions,
            dense,
        })
    }

    /// Tables drawn uniformly from `[-1e-4, 1e-4]`.
    pub fn new(config: HashGridConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut grid = Self::zeros(config)?;
        for v in &mut grid.tables {
            *v = T::of(rng.random_range(-INIT_SCALE..INIT_SCALE));
        }
        Ok(grid)
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.config
    }

    pub fn tables(&self) -> &[T] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [T] {
        &mut self.tables
    }

    pub fn param_count(&self) -> usize {
        self.tables.len()
    }

    /// Parameter index range holding `level`'s table.
    pub fn level_param_range(&self, level: usize) -> std::ops::Range<usize> {
        let f = self.config.feat_dim;
        self.level_offsets[level] * f..self.level_offsets[level + 1] * f
    }

    pub fn resolutions(&self) -> &[u32] {
        &self.resolutions
    }

    pub fn active_levels(&self) -> usize {
        self.active_levels
    }

    pub fn set_active_levels(&mut self, n: usize) {
        self.active_levels = n.clamp(1, self.config.levels);
    }

    /// Applies the unlocking schedule and returns the active level count.
    pub fn apply_schedule(&mut self, iteration: u64, schedule: &LevelSchedule) -> usize {
        self.set_active_levels(schedule.active_at(iteration, self.config.levels));
        self.active_levels
    }

    /// Fills `st` with corner rows and weights for `u` (clamped to `[0,1]`).
    pub fn stencil(&self, u: &[f64], st: &mut Stencil<T>) {
        let dims = self.config.dims;
        debug_assert_eq!(u.len(), dims);
        let corners = 1usize << dims;
        let mut uc = [0.0f64; 4];
        for i in 0..dims {
            uc[i] = if u[i].is_nan() { 0.0 } else { u[i].clamp(0.0, 1.0) };
        }
        st.active = self.active_levels;
        let mask = (self.config.table_size() - 1) as u32;
        for l in 0..self.active_levels {
            let n = self.resolutions[l];
            let nf = n as f64;
            let mut cell = [0u32; 4];
            let mut frac = [0.0f64; 4];
            for i in 0..dims {
                let pos = uc[i] * nf;
                let c = (pos as u32).min(n - 1); // pos >= 0, so truncation is floor
                cell[i] = c;
                frac[i] = pos - c as f64;
            }
            let base = self.level_offsets[l] as u32;
            let rows = &mut st.rows[l * corners..(l + 1) * corners];
            let weights = &mut st.weights[l * corners..(l + 1) * corners];
            if self.dense[l] {
                let side = n + 1;
                let mut stride = [0u32; 4];
                let mut s = 1u32;
                let mut origin = 0u32;
                for i in 0..dims {
                    stride[i] = s;
                    origin += cell[i] * s;
                    s *= side;
                }
                for c in 0..corners {
                    let mut idx = origin;
                    let mut w = 1.0f64;
                    for i in 0..dims {
                        if c >> i & 1 == 1 {
                            idx += stride[i];
                            w *= frac[i];
                        } else {
                            w *= 1.0 - frac[i];
                        }
                    }
                    rows[c] = base + idx;
                    weights[c] = T::of(w);
                }
            } else {
                for c in 0..corners {
                    let mut h = 0u32;
                    let mut w = 1.0f64;
                    for i in 0..dims {
                        let bit = (c >> i & 1) as u32;
                        h ^= (cell[i] + bit).wrapping_mul(HASH_PRIMES[i]);
                        w *= if bit == 1 { frac[i] } else { 1.0 - frac[i] };
                    }
                    rows[c] = base + (h & mask);
                    weights[c] = T::of(w);
                }
            }
        }
    }

    /// Interpolates features for a stencil; `out` has length `L*F`.
    pub fn gather(&self, st: &Stencil<T>, out: &mut [T]) {
        let f = self.config.feat_dim;
        debug_assert_eq!(out.len(), self.config.output_dim());
        out.fill(T::zero());
        let active = st.active.min(self.active_levels);
        for l in 0..active {
            let dst = &mut out[l * f..(l + 1) * f];
            for (&row, &w) in st.level_rows(l).iter().zip(st.level_weights(l)) {
                let r = row as usize * f;
                axpy(w, &self.tables[r..r + f], dst);
            }
        }
    }

    pub fn encode(&self, u: &[f64]) -> Vec<T> {
        let mut st = Stencil::new(&self.config);
        self.stencil(u, &mut st);
        let mut out = vec![T::zero(); self.config.output_dim()];
        self.gather(&st, &mut out);
        out
    }

    /// Accumulates `dL/d(table)` into `grad` given `dL/d(features)`.
    pub fn scatter(&self, st: &Stencil<T>, d_features: &[T], grad: &mut [T]) {
        let f = self.config.feat_dim;
        debug_assert_eq!(grad.len(), self.tables.len());
        let active = st.active.min(self.active_levels);
        for l in 0..active {
            let src = &d_features[l * f..(l + 1) * f];
            for (&row, &w) in st.level_rows(l).iter().zip(st.level_weights(l)) {
                let r = row as usize * f;
                axpy(w, src, &mut grad[r..r + f]);
            }
        }
    }

    /// Same as [`scatter`](Self::scatter) into a shared atomic accumulator.
    pub fn scatter_atomic(&self, st: &Stencil<T>, d_features: &[T], grad: &AtomicAccumulator) {
        let f = self.config.feat_dim;
        let active = st.active.min(self.active_levels);
        for l in 0..active {
            let src = &d_features[l * f..(l + 1) * f];
            for (&row, &w) in st.level_rows(l).iter().zip(st.level_weights(l)) {
                let r = row as usize * f;
                for (k, &d) in src.iter().enumerate() {
                    grad.add(r + k, (w * d).as_f64());
                }
            }
        }
    }

    /// Replaces the tables (checkpoint loading).
    pub fn load_tables(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.tables.len() {
            bail_arg!(
                "table payload has {} values, grid needs {}",
                values.len(),
                self.tables.len()
            );
        }
        self.tables.copy_from_slice(values);
        Ok(())
    }
}

/// Lock-free `f64` accumulator for concurrent gradient scatter.
///
/// Additions commute only up to rounding, so results depend on thread
/// interleaving and are not bitwise reproducible.
#[derive(Debug)]
pub struct AtomicAccumulator {
    cells: Vec<AtomicU64>,
}

impl AtomicAccumulator {
    pub fn new(len: usize) -> Self {
        Self {
            cells: (0..len).map(|_| AtomicU64::new(0f64.to_bits())).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    #[inline]
    pub fn add(&self, index: usize, value: f64) {
        if value == 0.0 {
            return;
        }
        let cell = &self.cells[index];
        let mut cur = cell.load(Ordering::Relaxed);
        loop {
            let next = (f64::from_bits(cur) + value).to_bits();
            match cell.compare_exchange_weak(cur, next, Ordering::Relaxed, Ordering::Relaxed) {
                Ok(_) => return,
                Err(seen) => cur = seen,
            }
        }
    }

    /// Adds the accumulated values into `out` and resets to zero.
    pub fn drain_into<T: Real>(&self, out: &mut [T]) {
        for (cell, o) in self.cells.iter().zip(out.iter_mut()) {
            let v = f64::from_bits(cell.swap(0f64.to_bits(), Ordering::Relaxed));
            if v != 0.0 {
                *o += T::of(v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(dims: usize) -> HashGridConfig {
        HashGridConfig {
            dims,
            levels: 4,
            feat_dim: 3,
            log2_table_size: 10,
            base_res: 2,
            growth: 2.0,
        }
    }

    fn random_grid(cfg: HashGridConfig, seed: u64) -> HashGrid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = HashGrid::<f64>::zeros(cfg).unwrap();
        for v in g.tables_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        g
    }

    #[test]
    fn resolutions_follow_growth() {
        let s = HashGridConfig::spatial();
        assert_eq!(s.level_resolution(0), 8);
        assert_eq!(s.level_resolution(1), 11);
        assert_eq!(HashGridConfig::temporal().level_resolution(0), 2);
        let r: Vec<_> = (0..12).map(|l| s.level_resolution(l)).collect();
        assert!(r.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn dense_indices() {
        let cfg = HashGridConfig::spatial();
        assert!(cfg.level_is_dense(0));
        assert_eq!(cell_index(&cfg, 0, &[0, 0, 0]), 0);
        assert_eq!(cell_index(&cfg, 0, &[1, 0, 0]), 1);
        assert_eq!(cell_index(&cfg, 0, &[0, 1, 0]), 9);
        assert_eq!(cell_index(&cfg, 0, &[0, 0, 1]), 81);
    }

    #[test]
    fn hashed_indices_stay_in_table() {
        let cfg = HashGridConfig::temporal();
        let level = (0..cfg.levels).find(|&l| !cfg.level_is_dense(l)).unwrap();
        let n = cfg.level_resolution(level);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1_000_000 {
            let c = [
                rng.random_range(0..=n),
                rng.random_range(0..=n),
                rng.random_range(0..=n),
                rng.random_range(0..=n),
            ];
            assert!(cell_index(&cfg, level, &c) < cfg.table_size());
        }
    }

    #[test]
    fn stencil_rows_agree_with_cell_index() {
        for dims in [3, 4] {
            let cfg = HashGridConfig {
                log2_table_size: 8,
                ..small(dims)
            };
            let g = HashGrid::<f64>::zeros(cfg.clone()).unwrap();
            let mut st = Stencil::new(&cfg);
            let u = vec![0.37; dims];
            g.stencil(&u, &mut st);
            for l in 0..cfg.levels {
                let n = cfg.level_resolution(l) as f64;
                let cell: Vec<u32> = u.iter().map(|x| (x * n).floor() as u32).collect();
                for c in 0..cfg.corners() {
                    let coords: Vec<u32> = (0..dims).map(|i| cell[i] + (c >> i & 1) as u32).collect();
                    let expect = g.level_offsets[l] + cell_index(&cfg, l, &coords);
                    assert_eq!(st.level_rows(l)[c] as usize, expect);
                }
            }
        }
    }

    #[test]
    fn vertex_query_returns_stored_row() {
        let cfg = small(3);
        let g = random_grid(cfg.clone(), 2);
        // level 0 has N = 2; vertex (1, 2, 0) sits at u = (0.5, 1.0, 0.0)
        let feats = g.encode(&[0.5, 1.0, 0.0]);
        let row = cell_index(&cfg, 0, &[1, 2, 0]);
        assert_eq!(&feats[..3], &g.tables()[row * 3..row * 3 + 3]);
    }

    #[test]
    fn cell_center_is_corner_mean() {
        let cfg = small(3);
        let g = random_grid(cfg.clone(), 3);
        let feats = g.encode(&[0.25, 0.25, 0.25]);
        let mut mean = [0.0; 3];
        for c in 0..8usize {
            let coords = [(c & 1) as u32, (c >> 1 & 1) as u32, (c >> 2 & 1) as u32];
            let r = cell_index(&cfg, 0, &coords);
            for k in 0..3 {
                mean[k] += g.tables()[r * 3 + k] / 8.0;
            }
        }
        for k in 0..3 {
            assert!((feats[k] - mean[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn inactive_levels_are_zero() {
        let cfg = HashGridConfig {
            log2_table_size: 12,
            feat_dim: 2,
            ..HashGridConfig::spatial()
        };
        let mut g = HashGrid::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        g.apply_schedule(0, &LevelSchedule::default());
        assert_eq!(g.active_levels(), 4);
        let f = g.encode(&[0.3, 0.6, 0.9]);
        assert_eq!(f.len(), 24);
        assert!(f[8..].iter().all(|&v| v == 0.0));
        assert!(f[..8].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn schedule_examples() {
        let s = LevelSchedule::default();
        assert_eq!(s.active_at(0, 12), 4);
        assert_eq!(s.active_at(2499, 12), 4);
        assert_eq!(s.active_at(2500, 12), 5);
        assert_eq!(s.active_at(20_000, 12), 12);
        assert_eq!(s.active_at(19_999, 12), 11);
        assert_eq!(s.active_at(1_000_000, 12), 12);
        assert_eq!(s.unlock_iteration(4), 2500);
        assert_eq!(s.unlock_iteration(11), 20_000);
    }

    #[test]
    fn weights_partition_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for dims in [3, 4] {
            let cfg = small(dims);
            let g = HashGrid::<f64>::zeros(cfg.clone()).unwrap();
            let mut st = Stencil::new(&cfg);
            for _ in 0..200 {
                let u: Vec<f64> = (0..dims).map(|_| rng.random_range(-0.1..1.1)).collect();
                g.stencil(&u, &mut st);
                for l in 0..cfg.levels {
                    let s: f64 = st.level_weights(l).iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn encoding_is_continuous() {
        let g = random_grid(small(4), 5);
        let lip = g.tables().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let eps = 1e-6;
        for _ in 0..100 {
            let u: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0 - eps)).collect();
            let mut v = u.clone();
            v[rng.random_range(0..4)] += eps;
            let (a, b) = (g.encode(&u), g.encode(&v));
            let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            // each level moves by at most 2 * max|row| * N_l * eps
            let bound = 2.0 * lip * g.resolutions().iter().map(|&n| n as f64).fold(0.0, f64::max) * eps;
            assert!(diff <= bound + 1e-15, "{diff} > {bound}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for dims in [3, 4] {
            let cfg = small(dims);
            let mut g = random_grid(cfg.clone(), 7 + dims as u64);
            g.set_active_levels(3);
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let u: Vec<f64> = (0..dims).map(|_| rng.random_range(0.0..1.0)).collect();
            let coef: Vec<f64> = (0..cfg.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let loss = |g: &HashGrid<f64>| -> f64 {
                g.encode(&u).iter().zip(&coef).map(|(a, b)| a * b).sum()
            };
            let mut st = Stencil::new(&cfg);
            g.stencil(&u, &mut st);
            let mut grad = vec![0.0; g.param_count()];
            g.scatter(&st, &coef, &mut grad);
            // half the probes on touched rows, half anywhere
            let touched: Vec<usize> = (0..3)
                .flat_map(|l| st.level_rows(l).to_vec())
                .flat_map(|r| (0..cfg.feat_dim).map(move |k| r as usize * cfg.feat_dim + k))
                .collect();
            let h = 1e-5;
            for probe in 0..20 {
                let idx = if probe % 2 == 0 {
                    touched[rng.random_range(0..touched.len())]
                } else {
                    rng.random_range(0..g.param_count())
                };
                let orig = g.tables()[idx];
                g.tables_mut()[idx] = orig + h;
                let lp = loss(&g);
                g.tables_mut()[idx] = orig - h;
                let lm = loss(&g);
                g.tables_mut()[idx] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - grad[idx]).abs() <= 1e-4 * fd.abs().max(1e-6), "{fd} vs {}", grad[idx]);
            }
        }
    }

    #[test]
    fn masked_levels_are_isolated() {
        let cfg = small(3);
        let mut g = random_grid(cfg.clone(), 9);
        g.set_active_levels(2);
        let u = [0.41, 0.13, 0.77];
        let before = g.encode(&u);
        for l in 2..cfg.levels {
            for i in g.level_param_range(l) {
                g.tables_mut()[i] += 3.0;
            }
        }
        let after = g.encode(&u);
        assert_eq!(before, after);
        let mut st = Stencil::new(&cfg);
        g.stencil(&u, &mut st);
        let mut grad = vec![0.0; g.param_count()];
        g.scatter(&st, &vec![1.0; cfg.output_dim()], &mut grad);
        for l in 2..cfg.levels {
            assert!(grad[g.level_param_range(l)].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn atomic_scatter_matches_private() {
        let cfg = small(4);
        let g = random_grid(cfg.clone(), 10);
        let acc = AtomicAccumulator::new(g.param_count());
        let mut private = vec![0.0; g.param_count()];
        let mut st = Stencil::new(&cfg);
        let d: Vec<f64> = (0..cfg.output_dim()).map(|i| i as f64 * 0.1 - 0.5).collect();
        for k in 0..10 {
            let u = [k as f64 / 10.0, 0.2, 0.9, 0.5];
            g.stencil(&u, &mut st);
            g.scatter(&st, &d, &mut private);
            g.scatter_atomic(&st, &d, &acc);
        }
        let mut drained = vec![0.0; g.param_count()];
        acc.drain_into(&mut drained);
        for (a, b) in private.iter().zip(&drained) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = HashGridConfig::spatial();
        c.growth = 1.0;
        assert!(c.validate().is_err());
        let mut c = HashGridConfig::spatial();
        c.dims = 2;
        assert!(HashGrid::<f32>::zeros(c).is_err());
    }
}
