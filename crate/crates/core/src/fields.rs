//! The static, dynamic and vessel-probability fields and their composition.
//!
//! Guided mode mixes the two attenuation fields with the probability:
//! `mu_c = (1 - p) mu_s + p mu_d`, so upstream gradients reach the static
//! field scaled by `1 - p` and the dynamic field scaled by `p`. Naive mode
//! adds them (`mu_c = mu_s + mu_d`, both partials 1) and never touches the
//! probability field, which stays allocated so checkpoints look the same.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use std::sync::Arc;

use crate::hash_encoding::{AtomicAccumulator, HashGrid, HashGridConfig, LevelSchedule, Stencil};
use crate::network::{Mlp, MlpConfig, OutputActivation};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionMode {
    Guided,
    Naive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSetConfig {
    /// Shared by the static and probability encoders.
    pub spatial_grid: HashGridConfig,
    pub temporal_grid: HashGridConfig,
    pub hidden_dim: usize,
    /// Weight matrices per decoder.
    pub num_layers: usize,
    /// Bias terms in the decoders.
    pub decoder_bias: bool,
    pub mode: CompositionMode,
}

impl FieldSetConfig {
    /// Full-size model: 12 levels of 2^19 x 8 features, 128-wide bias-free
    /// decoders.
    pub fn paper() -> Self {
        Self {
            spatial_grid: HashGridConfig::spatial(),
            temporal_grid: HashGridConfig::temporal(),
            hidden_dim: 128,
            num_layers: 3,
            decoder_bias: false,
            mode: CompositionMode::Guided,
        }
    }

    /// Reduced widths for single-machine phantom runs. Level counts, base
    /// resolutions and growth factors are unchanged.
    pub fn desk() -> Self {
        let narrow = |g: HashGridConfig| HashGridConfig {
            feat_dim: 2,
            log2_table_size: 16,
            ..g
        };
        Self {
            spatial_grid: narrow(HashGridConfig::spatial()),
            temporal_grid: narrow(HashGridConfig::temporal()),
            hidden_dim: 32,
            num_layers: 3,
            decoder_bias: false,
            mode: CompositionMode::Guided,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spatial_grid.validate()?;
        self.temporal_grid.validate()?;
        if self.spatial_grid.dims != 3 || self.temporal_grid.dims != 4 {
            return Err(Error::Config("spatial grid must be 3D and temporal grid 4D".into()));
        }
        if self.spatial_grid.levels != self.temporal_grid.levels {
            return Err(Error::Config("spatial and temporal grids must have equal level counts".into()));
        }
        self.mlp_config(&self.spatial_grid, OutputActivation::Relu).validate()
    }

    fn mlp_config(&self, grid: &HashGridConfig, output: OutputActivation) -> MlpConfig {
        MlpConfig {
            in_dim: grid.output_dim(),
            hidden_dim: self.hidden_dim,
            out_dim: 1,
            num_layers: self.num_layers,
            output,
            bias: self.decoder_bias,
        }
    }
}

/// Hash encoder followed by a decoder.
#[derive(Clone, Debug)]
pub struct Field<T> {
    pub grid: HashGrid<T>,
    pub mlp: Mlp<T>,
}

impl<T: Real> Field<T> {
    fn new(grid: HashGridConfig, mlp: MlpConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            grid: HashGrid::new(grid, rng)?,
            mlp: Mlp::new(mlp, rng)?,
        })
    }

    fn zeros(grid: HashGridConfig, mlp: MlpConfig) -> Result<Self> {
        Ok(Self {
            grid: HashGrid::zeros(grid)?,
            mlp: Mlp::zeros(mlp)?,
        })
    }
}

/// Identifies a parameter block; the order is the checkpoint order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamBlock {
    StaticGrid,
    StaticMlp,
    DynamicGrid,
    DynamicMlp,
    ProbGrid,
    ProbMlp,
}

impl ParamBlock {
    pub const ALL: [ParamBlock; 6] = [
        ParamBlock::StaticGrid,
        ParamBlock::StaticMlp,
        ParamBlock::DynamicGrid,
        ParamBlock::DynamicMlp,
        ParamBlock::ProbGrid,
        ParamBlock::ProbMlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamBlock::StaticGrid => "static_grid",
            ParamBlock::StaticMlp => "static_mlp",
            ParamBlock::DynamicGrid => "dynamic_grid",
            ParamBlock::DynamicMlp => "dynamic_mlp",
            ParamBlock::ProbGrid => "prob_grid",
            ParamBlock::ProbMlp => "prob_mlp",
        }
    }

    pub fn is_grid(self) -> bool {
        matches!(self, ParamBlock::StaticGrid | ParamBlock::DynamicGrid | ParamBlock::ProbGrid)
    }
}

/// Shared atomic sinks for the static, dynamic and probability grids.
pub type AtomicGridGrads = Arc<[AtomicAccumulator; 3]>;

/// Gradient buffers mirroring the parameters of a [`FieldSet`].
///
/// With an atomic sink attached, grid gradients bypass the private buffers
/// and go to the shared accumulators; decoder gradients stay private.
#[derive(Clone, Debug)]
pub struct FieldGrads<T> {
    blocks: [Vec<T>; 6],
    atomic: Option<AtomicGridGrads>,
}

fn scatter_grid<T: Real>(
    grid: &HashGrid<T>,
    st: &Stencil<T>,
    d_feat: &[T],
    block: &mut [T],
    sink: Option<&AtomicAccumulator>,
) {
    match sink {
        Some(acc) => grid.scatter_atomic(st, d_feat, acc),
        None => grid.scatter(st, d_feat, block),
    }
}

impl<T: Real> FieldGrads<T> {
    pub fn for_fields(fields: &FieldSet<T>) -> Self {
        Self {
            blocks: ParamBlock::ALL.map(|b| vec![T::zero(); fields.block(b).len()]),
            atomic: None,
        }
    }

    /// Allocates shared accumulators sized for the three grids.
    pub fn atomic_sinks(fields: &FieldSet<T>) -> AtomicGridGrads {
        Arc::new([ParamBlock::StaticGrid, ParamBlock::DynamicGrid, ParamBlock::ProbGrid]
            .map(|b| AtomicAccumulator::new(fields.block(b).len())))
    }

    pub fn attach_atomic(&mut self, sinks: AtomicGridGrads) {
        self.atomic = Some(sinks);
    }

    pub fn detach_atomic(&mut self) {
        self.atomic = None;
    }

    /// Moves everything accumulated in `sinks` into the grid blocks.
    pub fn drain_atomic(&mut self, sinks: &AtomicGridGrads) {
        sinks[0].drain_into(&mut self.blocks[ParamBlock::StaticGrid as usize]);
        sinks[1].drain_into(&mut self.blocks[ParamBlock::DynamicGrid as usize]);
        sinks[2].drain_into(&mut self.blocks[ParamBlock::ProbGrid as usize]);
    }

    pub fn block(&self, b: ParamBlock) -> &[T] {
        &self.blocks[b as usize]
    }

    pub fn block_mut(&mut self, b: ParamBlock) -> &mut [T] {
        &mut self.blocks[b as usize]
    }

    pub fn zero(&mut self) {
        for b in &mut self.blocks {
            b.fill(T::zero());
        }
    }

    pub fn add_assign(&mut self, other: &FieldGrads<T>) {
        for (dst, src) in self.blocks.iter_mut().zip(&other.blocks) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn is_zero(&self, b: ParamBlock) -> bool {
        self.block(b).iter().all(|&v| v == T::zero())
    }
}

/// Everything a sample's backward pass needs from its forward pass.
#[derive(Clone, Debug)]
pub struct PointCache<T> {
    version: u64,
    valid: bool,
    naive: bool,
    forced: bool,
    st3: Stencil<T>,
    st4: Stencil<T>,
    feat_s: Vec<T>,
    feat_p: Vec<T>,
    feat_d: Vec<T>,
    acts_s: Vec<T>,
    acts_p: Vec<T>,
    acts_d: Vec<T>,
    pub mu_s: T,
    pub mu_d: T,
    pub p: T,
}

impl<T: Real> PointCache<T> {
    pub fn new(fields: &FieldSet<T>) -> Self {
        let s = fields.static_field.grid.config();
        let d = fields.dynamic_field.grid.config();
        let acts = fields.static_field.mlp.config().activation_len();
        Self {
            version: u64::MAX,
            valid: false,
            naive: false,
            forced: false,
            st3: Stencil::new(s),
            st4: Stencil::new(d),
            feat_s: vec![T::zero(); s.output_dim()],
            feat_p: vec![T::zero(); s.output_dim()],
            feat_d: vec![T::zero(); d.output_dim()],
            acts_s: vec![T::zero(); acts],
            acts_p: vec![T::zero(); acts],
            acts_d: vec![T::zero(); acts],
            mu_s: T::zero(),
            mu_d: T::zero(),
            p: T::zero(),
        }
    }

    /// Overrides the cached probability (used to pin `p` in tests).
    pub fn inject_probability(&mut self, p: T) {
        self.p = p;
        self.forced = true;
    }

    pub fn static_part(&self) -> T {
        if self.naive {
            self.mu_s
        } else {
            (T::one() - self.p) * self.mu_s
        }
    }

    pub fn dynamic_part(&self) -> T {
        if self.naive {
            self.mu_d
        } else {
            self.p * self.mu_d
        }
    }

    pub fn mu_c(&self) -> T {
        self.static_part() + self.dynamic_part()
    }
}

/// Backward scratch buffers, one per worker.
#[derive(Clone, Debug)]
pub struct FieldScratch<T> {
    d_feat3: Vec<T>,
    d_feat4: Vec<T>,
    hidden: Vec<T>,
}

impl<T: Real> FieldScratch<T> {
    pub fn new(fields: &FieldSet<T>) -> Self {
        Self {
            d_feat3: vec![T::zero(); fields.static_field.grid.config().output_dim()],
            d_feat4: vec![T::zero(); fields.dynamic_field.grid.config().output_dim()],
            hidden: vec![T::zero(); 2 * fields.static_field.mlp.config().hidden_dim],
        }
    }
}

#[derive(Clone, Debug)]
pub struct FieldSet<T> {
    config: FieldSetConfig,
    pub static_field: Field<T>,
    pub dynamic_field: Field<T>,
    pub prob_field: Field<T>,
    forced_p: Option<T>,
    version: u64,
}

impl<T: Real> FieldSet<T> {
    pub fn new(config: FieldSetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let relu_s = config.mlp_config(&config.spatial_grid, OutputActivation::Relu);
        let relu_d = config.mlp_config(&config.temporal_grid, OutputActivation::Relu);
        let sig = config.mlp_config(&config.spatial_grid, OutputActivation::Sigmoid);
        Ok(Self {
            static_field: Field::new(config.spatial_grid.clone(), relu_s, rng)?,
            dynamic_field: Field::new(config.temporal_grid.clone(), relu_d, rng)?,
            prob_field: Field::new(config.spatial_grid.clone(), sig, rng)?,
            config,
            forced_p: None,
            version: 0,
        })
    }

    /// All parameters zero: `mu_s = mu_d = 0` and `p = 0.5` everywhere.
    pub fn zeros(config: FieldSetConfig) -> Result<Self> {
        config.validate()?;
        let relu_s = config.mlp_config(&config.spatial_grid, OutputActivation::Relu);
        let relu_d = config.mlp_config(&config.temporal_grid, OutputActivation::Relu);
        let sig = config.mlp_config(&config.spatial_grid, OutputActivation::Sigmoid);
        Ok(Self {
            static_field: Field::zeros(config.spatial_grid.clone(), relu_s)?,
            dynamic_field: Field::zeros(config.temporal_grid.clone(), relu_d)?,
            prob_field: Field::zeros(config.spatial_grid.clone(), sig)?,
            config,
            forced_p: None,
            version: 0,
        })
    }

    pub fn config(&self) -> &FieldSetConfig {
        &self.config
    }

    pub fn mode(&self) -> CompositionMode {
        self.config.mode
    }

    pub fn set_mode(&mut self, mode: CompositionMode) {
        self.config.mode = mode;
        self.version += 1;
    }

    /// Parameter version; bumped whenever parameters may have changed.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    /// Pins `p` to a constant for every query; the probability field then
    /// receives no gradient.
    pub fn set_forced_probability(&mut self, p: Option<f64>) {
        self.forced_p = p.map(T::of);
        self.version += 1;
    }

    pub fn block(&self, b: ParamBlock) -> &[T] {
        match b {
            ParamBlock::StaticGrid => self.static_field.grid.tables(),
            ParamBlock::StaticMlp => self.static_field.mlp.params(),
            ParamBlock::DynamicGrid => self.dynamic_field.grid.tables(),
            ParamBlock::DynamicMlp => self.dynamic_field.mlp.params(),
            ParamBlock::ProbGrid => self.prob_field.grid.tables(),
            ParamBlock::ProbMlp => self.prob_field.mlp.params(),
        }
    }

    pub fn block_mut(&mut self, b: ParamBlock) -> &mut [T] {
        self.version += 1;
        match b {
            ParamBlock::StaticGrid => self.static_field.grid.tables_mut(),
            ParamBlock::StaticMlp => self.static_field.mlp.params_mut(),
            ParamBlock::DynamicGrid => self.dynamic_field.grid.tables_mut(),
            ParamBlock::DynamicMlp => self.dynamic_field.mlp.params_mut(),
            ParamBlock::ProbGrid => self.prob_field.grid.tables_mut(),
            ParamBlock::ProbMlp => self.prob_field.mlp.params_mut(),
        }
    }

    pub fn grid(&self, b: ParamBlock) -> Option<&HashGrid<T>> {
        match b {
            ParamBlock::StaticGrid => Some(&self.static_field.grid),
            ParamBlock::DynamicGrid => Some(&self.dynamic_field.grid),
            ParamBlock::ProbGrid => Some(&self.prob_field.grid),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        ParamBlock::ALL.iter().map(|&b| self.block(b).len()).sum()
    }

    pub fn set_active_levels(&mut self, n: usize) {
        self.static_field.grid.set_active_levels(n);
        self.dynamic_field.grid.set_active_levels(n);
        self.prob_field.grid.set_active_levels(n);
    }

    pub fn apply_schedule(&mut self, iteration: u64, schedule: &LevelSchedule) -> usize {
        let n = schedule.active_at(iteration, self.config.spatial_grid.levels);
        self.set_active_levels(n);
        n
    }

    pub fn active_levels(&self) -> usize {
        self.static_field.grid.active_levels()
    }

    /// Vessel probability only (used for the sparsity regularizer).
    pub fn query_probability(&self, x: [f64; 3], cache: &mut PointCache<T>) -> T {
        cache.version = self.version;
        cache.valid = true;
        cache.naive = false;
        if let Some(p) = self.forced_p {
            cache.forced = true;
            cache.p = p;
            return p;
        }
        cache.forced = false;
        self.prob_field.grid.stencil(&x, &mut cache.st3);
        self.prob_field.grid.gather(&cache.st3, &mut cache.feat_p);
        cache.p = self.prob_field.mlp.forward_into(&cache.feat_p, &mut cache.acts_p);
        cache.p
    }

    /// Backward of [`query_probability`](Self::query_probability).
    pub fn backward_probability(
        &self,
        cache: &PointCache<T>,
        d_p: T,
        grads: &mut FieldGrads<T>,
        scratch: &mut FieldScratch<T>,
    ) -> Result<()> {
        self.check_cache(cache)?;
        if cache.forced || d_p == T::zero() {
            return Ok(());
        }
        let sink = grads.atomic.as_ref().map(|a| &a[2]);
        let [_, _, _, _, p_grid, p_mlp] = &mut grads.blocks;
        self.prob_field.mlp.backward_into(
            &cache.feat_p,
            &cache.acts_p,
            d_p,
            Some(&mut scratch.d_feat3),
            p_mlp,
            &mut scratch.hidden,
        );
        scatter_grid(&self.prob_field.grid, &cache.st3, &scratch.d_feat3, p_grid, sink);
        Ok(())
    }

    /// Composed contrast attenuation at normalized point `x` and time `t`.
    pub fn query_mu_c(&self, x: [f64; 3], t: f64, cache: &mut PointCache<T>) -> T {
        self.query_spatial(x, cache);
        self.query_temporal(x, t, cache)
    }

    /// Time-independent half of [`query_mu_c`](Self::query_mu_c): fills
    /// `mu_s` and `p`. Follow with [`query_temporal`](Self::query_temporal)
    /// at the same point, once per timestamp, to sweep time cheaply.
    pub fn query_spatial(&self, x: [f64; 3], cache: &mut PointCache<T>) {
        cache.version = self.version;
        cache.valid = true;
        cache.naive = self.config.mode == CompositionMode::Naive;
        self.static_field.grid.stencil(&x, &mut cache.st3);
        self.static_field.grid.gather(&cache.st3, &mut cache.feat_s);
        cache.mu_s = self.static_field.mlp.forward_into(&cache.feat_s, &mut cache.acts_s);
        if cache.naive {
            cache.forced = false;
            cache.p = T::zero();
        } else if let Some(p) = self.forced_p {
            cache.forced = true;
            cache.p = p;
        } else {
            cache.forced = false;
            self.prob_field.grid.gather(&cache.st3, &mut cache.feat_p);
            cache.p = self.prob_field.mlp.forward_into(&cache.feat_p, &mut cache.acts_p);
        }
    }

    /// Dynamic half of [`query_mu_c`](Self::query_mu_c); returns `mu_c`.
    pub fn query_temporal(&self, x: [f64; 3], t: f64, cache: &mut PointCache<T>) -> T {
        let x4 = [x[0], x[1], x[2], t];
        self.dynamic_field.grid.stencil(&x4, &mut cache.st4);
        self.dynamic_field.grid.gather(&cache.st4, &mut cache.feat_d);
        cache.mu_d = self.dynamic_field.mlp.forward_into(&cache.feat_d, &mut cache.acts_d);
        cache.mu_c()
    }

    fn check_cache(&self, cache: &PointCache<T>) -> Result<()> {
        if !cache.valid {
            return Err(Error::State("backward without a forward pass".into()));
        }
        if cache.version != self.version {
            return Err(Error::State(format!(
                "stale cache: computed at parameter version {}, fields are at {}",
                cache.version, self.version
            )));
        }
        Ok(())
    }

    /// Routes `dL/dmu_c` into the three fields.
    ///
    /// Guided: `d/dmu_s = 1 - p`, `d/dmu_d = p`, and `d/dp = mu_d - mu_s`,
    /// the last being the derivative of the mixture with respect to its
    /// weight. Naive: both attenuation partials are 1.
    pub fn backward_mu_c(
        &self,
        cache: &PointCache<T>,
        d_mu_c: T,
        grads: &mut FieldGrads<T>,
        scratch: &mut FieldScratch<T>,
    ) -> Result<()> {
        self.check_cache(cache)?;
        let (d_s, d_d, d_p) = if cache.naive {
            (d_mu_c, d_mu_c, T::zero())
        } else {
            let d_p = if cache.forced { T::zero() } else { d_mu_c * (cache.mu_d - cache.mu_s) };
            (d_mu_c * (T::one() - cache.p), d_mu_c * cache.p, d_p)
        };
        let sinks = grads.atomic.as_ref();
        let [s_grid, s_mlp, d_grid, d_mlp, p_grid, p_mlp] = &mut grads.blocks;
        if d_s != T::zero() {
            self.static_field.mlp.backward_into(
                &cache.feat_s,
                &cache.acts_s,
                d_s,
                Some(&mut scratch.d_feat3),
                s_mlp,
                &mut scratch.hidden,
            );
            scatter_grid(&self.static_field.grid, &cache.st3, &scratch.d_feat3, s_grid, sinks.map(|a| &a[0]));
        }
        if d_p != T::zero() {
            self.prob_field.mlp.backward_into(
                &cache.feat_p,
                &cache.acts_p,
                d_p,
                Some(&mut scratch.d_feat3),
                p_mlp,
                &mut scratch.hidden,
            );
            scatter_grid(&self.prob_field.grid, &cache.st3, &scratch.d_feat3, p_grid, sinks.map(|a| &a[2]));
        }
        if d_d != T::zero() {
            self.dynamic_field.mlp.backward_into(
                &cache.feat_d,
                &cache.acts_d,
                d_d,
                Some(&mut scratch.d_feat4),
                d_mlp,
                &mut scratch.hidden,
            );
            scatter_grid(&self.dynamic_field.grid, &cache.st4, &scratch.d_feat4, d_grid, sinks.map(|a| &a[1]));
        }
        Ok(())
    }

    /// `((1 - p) mu_s, p mu_d)` in guided mode, `(mu_s, mu_d)` in naive mode.
    pub fn query_components(&self, x: [f64; 3], t: f64) -> (T, T) {
        let mut cache = PointCache::new(self);
        self.query_mu_c(x, t, &mut cache);
        (cache.static_part(), cache.dynamic_part())
    }

    pub fn query(&self, x: [f64; 3], t: f64) -> T {
        let mut cache = PointCache::new(self);
        self.query_mu_c(x, t, &mut cache)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> FieldSetConfig {
        let g = |dims, base, growth| HashGridConfig {
            dims,
            levels: 3,
            feat_dim: 2,
            log2_table_size: 8,
            base_res: base,
            growth,
        };
        FieldSetConfig {
            spatial_grid: g(3, 4, 1.5),
            temporal_grid: g(4, 2, 1.4),
            hidden_dim: 8,
            num_layers: 3,
            decoder_bias: true,
            mode: CompositionMode::Guided,
        }
    }

    /// Random fields with output biases pushed positive so ReLUs are active.
    fn lively(seed: u64) -> FieldSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = FieldSet::<f64>::new(tiny_config(), &mut rng).unwrap();
        for b in ParamBlock::ALL {
            let scale = if b.is_grid() { 0.5 } else { 0.3 };
            for v in f.block_mut(b) {
                *v += rng.random_range(-scale..scale);
            }
        }
        for field in [&mut f.static_field, &mut f.dynamic_field] {
            let bi = field.mlp.bias_index(2, 0);
            field.mlp.params_mut()[bi] = 1.0;
        }
        f.bump_version();
        f
    }

    #[test]
    fn composition_examples() {
        let f = lively(1);
        let mut c = PointCache::new(&f);
        f.query_mu_c([0.2, 0.5, 0.7], 0.3, &mut c);
        c.mu_s = 1.0;
        c.mu_d = 3.0;
        c.inject_probability(0.0);
        assert_eq!(c.mu_c(), 1.0);
        c.inject_probability(1.0);
        assert_eq!(c.mu_c(), 3.0);
        c.inject_probability(0.3);
        assert!((c.mu_c() - 1.6).abs() < 1e-15);
        c.inject_probability(0.5);
        c.mu_s = 2.0;
        c.mu_d = 2.0;
        assert_eq!((c.static_part(), c.dynamic_part()), (1.0, 1.0));
    }

    #[test]
    fn components_sum_bitwise_and_static_is_time_invariant() {
        let f = lively(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let x = [rng.random(), rng.random(), rng.random()];
            let t = rng.random();
            let (s, d) = f.query_components(x, t);
            assert_eq!(s + d, f.query(x, t));
            let mut c0 = PointCache::new(&f);
            let mut c1 = PointCache::new(&f);
            f.query_mu_c(x, 0.0, &mut c0);
            f.query_mu_c(x, 1.0, &mut c1);
            assert_eq!(c0.p.to_bits(), c1.p.to_bits());
            assert_eq!(c0.mu_s.to_bits(), c1.mu_s.to_bits());
            assert!(c0.mu_c() >= 0.0 && c0.p > 0.0 && c0.p < 1.0);
        }
    }

    #[test]
    fn zero_fields_give_half_probability() {
        let f = FieldSet::<f32>::zeros(tiny_config()).unwrap();
        let mut c = PointCache::new(&f);
        assert_eq!(f.query_mu_c([0.5; 3], 0.5, &mut c), 0.0);
        assert_eq!(c.p, 0.5);
    }

    #[test]
    fn routing_at_probability_extremes() {
        let mut f = lively(4);
        let mut scratch = FieldScratch::new(&f);
        for (p, silent, live) in [
            (0.0, ParamBlock::DynamicMlp, ParamBlock::StaticMlp),
            (1.0, ParamBlock::StaticMlp, ParamBlock::DynamicMlp),
        ] {
            f.set_forced_probability(Some(p));
            let mut g = FieldGrads::for_fields(&f);
            let mut c = PointCache::new(&f);
            for k in 0..20 {
                let x = [k as f64 / 20.0, 0.3, 0.6];
                f.query_mu_c(x, 0.4, &mut c);
                f.backward_mu_c(&c, 1.0, &mut g, &mut scratch).unwrap();
            }
            let silent_grid = if silent == ParamBlock::DynamicMlp {
                ParamBlock::DynamicGrid
            } else {
                ParamBlock::StaticGrid
            };
            assert!(g.is_zero(silent) && g.is_zero(silent_grid));
            assert!(!g.is_zero(live));
            assert!(g.is_zero(ParamBlock::ProbMlp) && g.is_zero(ParamBlock::ProbGrid));
        }
    }

    #[test]
    fn equal_attenuations_give_no_probability_gradient() {
        let f = lively(5);
        let mut c = PointCache::new(&f);
        f.query_mu_c([0.3, 0.3, 0.3], 0.5, &mut c);
        c.mu_d = c.mu_s;
        let mut g = FieldGrads::for_fields(&f);
        let mut scratch = FieldScratch::new(&f);
        f.backward_mu_c(&c, 1.0, &mut g, &mut scratch).unwrap();
        assert!(g.is_zero(ParamBlock::ProbMlp));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut f = lively(6);
        let mut c = PointCache::new(&f);
        let mut g = FieldGrads::for_fields(&f);
        let mut scratch = FieldScratch::new(&f);
        assert!(matches!(f.backward_mu_c(&c, 1.0, &mut g, &mut scratch), Err(Error::State(_))));
        f.query_mu_c([0.5; 3], 0.5, &mut c);
        f.block_mut(ParamBlock::StaticMlp)[0] += 1.0;
        assert!(matches!(f.backward_mu_c(&c, 1.0, &mut g, &mut scratch), Err(Error::State(_))));
    }

    #[test]
    fn naive_mode_sums_and_skips_probability() {
        let mut f = lively(7);
        let x = [0.1, 0.8, 0.4];
        let (s, d) = f.query_components(x, 0.6);
        f.set_mode(CompositionMode::Naive);
        let mut c = PointCache::new(&f);
        let mu = f.query_mu_c(x, 0.6, &mut c);
        assert_eq!(mu, c.mu_s + c.mu_d);
        assert!(s <= c.mu_s && d <= c.mu_d);
        let mut g = FieldGrads::for_fields(&f);
        let mut scratch = FieldScratch::new(&f);
        f.backward_mu_c(&c, 1.0, &mut g, &mut scratch).unwrap();
        assert!(g.is_zero(ParamBlock::ProbGrid) && g.is_zero(ParamBlock::ProbMlp));
        assert!(!g.is_zero(ParamBlock::StaticMlp) && !g.is_zero(ParamBlock::DynamicMlp));
    }

    #[test]
    fn half_probability_is_half_of_naive() {
        let mut f = lively(8);
        // zero the probability decoder so p = sigmoid(0) = 0.5 everywhere
        f.block_mut(ParamBlock::ProbMlp).fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x = [rng.random(), rng.random(), rng.random()];
            let t = rng.random();
            let guided = f.query(x, t);
            let mut naive = f.clone();
            naive.set_mode(CompositionMode::Naive);
            assert!((guided - 0.5 * naive.query(x, t)).abs() < 1e-14);
        }
    }

    #[test]
    fn composed_gradient_matches_finite_differences() {
        let mut f = lively(10);
        let x = [0.37, 0.61, 0.22];
        let t = 0.45;
        let mut c = PointCache::new(&f);
        f.query_mu_c(x, t, &mut c);
        let mut g = FieldGrads::for_fields(&f);
        let mut scratch = FieldScratch::new(&f);
        f.backward_mu_c(&c, 1.0, &mut g, &mut scratch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for b in [ParamBlock::StaticMlp, ParamBlock::DynamicMlp, ParamBlock::ProbMlp] {
            for _ in 0..5 {
                let i = rng.random_range(0..f.block(b).len());
                let orig = f.block(b)[i];
                f.block_mut(b)[i] = orig + h;
                let lp = f.query(x, t);
                f.block_mut(b)[i] = orig - h;
                let lm = f.query(x, t);
                f.block_mut(b)[i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = g.block(b)[i];
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-6), "{b:?}[{i}]: {fd} vs {an}");
            }
        }
    }
}
