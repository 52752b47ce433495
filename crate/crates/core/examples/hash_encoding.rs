//! Inspects the multiresolution hash encodings used by the fields.
//!
//! Prints per-level resolutions and storage, encodes a point, and shows how
//! the progressive schedule masks the finer levels.
//!
//! ```text
//! cargo run --release --example hash_encoding
//! ```

use dsa_field::hash_encoding::{HashGrid, HashGridConfig, LevelSchedule, Stencil};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dsa_field::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (name, cfg) in [("spatial", HashGridConfig::spatial()), ("temporal", HashGridConfig::temporal())] {
        let grid = HashGrid::<f32>::new(cfg.clone(), &mut rng)?;
        println!("{name}: {} dims, {} levels, {} features, table 2^{}", cfg.dims, cfg.levels, cfg.feat_dim, cfg.log2_table_size);
        for l in 0..cfg.levels {
            println!(
                "  level {l:2}  N = {:5}  {:6}  rows {}",
                cfg.level_resolution(l),
                if cfg.level_is_dense(l) { "dense" } else { "hashed" },
                cfg.level_rows(l)
            );
        }
        println!("  {} parameters", grid.param_count());
    }

    let mut grid = HashGrid::<f64>::new(HashGridConfig::spatial(), &mut rng)?;
    let schedule = LevelSchedule::default();
    let x = [0.31, 0.62, 0.47];
    let mut st = Stencil::new(grid.config());
    for it in [0, 2500, 10_000, 20_000] {
        let active = grid.apply_schedule(it, &schedule);
        grid.stencil(&x, &mut st);
        let weights: f64 = st.level_weights(0).iter().sum();
        let enc = grid.encode(&x);
        let nonzero = enc.iter().filter(|v| **v != 0.0).count();
        println!("iteration {it:6}: {active:2} active levels, {nonzero:2}/{} non-zero features, level-0 weights sum {weights}", enc.len());
    }
    Ok(())
}
