#![allow(dead_code)]

use dsa_field::fields::{CompositionMode, FieldSet, FieldSetConfig, ParamBlock};
use dsa_field::geometry::{Aabb, ScanGeometry};
use dsa_field::hash_encoding::HashGridConfig;
use dsa_field::dataset_io::Dataset;
use dsa_field::phantom::{generate_dataset, PhantomScene};
use dsa_field::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_fields(bias: bool) -> FieldSetConfig {
    let g = |dims, base, growth| HashGridConfig {
        dims,
        levels: 4,
        feat_dim: 2,
        log2_table_size: 9,
        base_res: base,
        growth,
    };
    FieldSetConfig {
        spatial_grid: g(3, 3, 1.6),
        temporal_grid: g(4, 2, 1.5),
        hidden_dim: 8,
        num_layers: 3,
        decoder_bias: bias,
        mode: CompositionMode::Guided,
    }
}

/// Random fields whose parameters are large enough that every part of the
/// composition is active somewhere.
pub fn lively<T: Real>(seed: u64, bias: bool) -> FieldSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = FieldSet::<T>::new(tiny_fields(bias), &mut rng).unwrap();
    for b in ParamBlock::ALL {
        let scale = if b.is_grid() { 0.5 } else { 0.3 };
        for v in f.block_mut(b) {
            *v = T::of(v.as_f64() + rng.random_range(-scale..scale));
        }
    }
    if bias {
        for field in [&mut f.static_field, &mut f.dynamic_field] {
            let bi = field.mlp.bias_index(2, 0);
            field.mlp.params_mut()[bi] = T::of(1.0);
        }
    }
    f.bump_version();
    f
}

/// A few frames of the branching-Y phantom on a tiny detector.
pub fn small_geometry() -> ScanGeometry {
    ScanGeometry {
        det_cols: 24,
        det_rows: 24,
        pitch_u_mm: 14.0,
        pitch_v_mm: 14.0,
        num_frames_total: 12,
        ..ScanGeometry::desk()
    }
}

pub fn small_dataset(frames: &[usize]) -> Dataset {
    let g = small_geometry();
    generate_dataset(&PhantomScene::branching_y(), &g, frames, 0.0, 0, "branching-y").unwrap()
}

pub fn unit_box() -> Aabb {
    Aabb::cube(220.0)
}
