//! Drives the command-line front end in-process: phantom generation,
//! training, extraction, meshing and evaluation into one output directory.
//!
//! The same steps with the installed binary:
//!
//! ```text
//! dsa-field phantom-gen --frames 60 --views 30 --out run/data
//! dsa-field train --data run/data/train --iterations 2000 --out run/train
//! dsa-field extract --checkpoint run/train/checkpoint_final.f32 --average --out run/vol
//! dsa-field mesh --volume run/vol/mean_mu_c.f32 --out run/vol
//! dsa-field eval --checkpoint run/train/checkpoint_final.f32 --data run/data/test \
//!     --mesh run/vol/mesh.ply --scene branching-y --out run/eval
//! ```
//!
//! ```text
//! cargo run --release --example cli_pipeline -- [out_dir] [iterations]
//! ```

use clap::Parser;
use dsa_field::cli::{run, Cli};

fn main() {
    let mut args = std::env::args().skip(1);
    let root = args.next().unwrap_or_else(|| "target/example-out/cli".into());
    let iterations = args.next().unwrap_or_else(|| "500".into());
    let p = |sub: &str| format!("{root}/{sub}");
    let steps: Vec<Vec<String>> = [
        vec!["phantom-gen", "--frames", "60", "--views", "30", "--gt-res", "64", "--out", &p("data")],
        vec!["train", "--data", &p("data/train"), "--iterations", &iterations, "--out", &p("train")],
        vec!["extract", "--checkpoint", &p("train/checkpoint_final.f32"), "--average", "--res", "96", "--out", &p("vol")],
        vec!["mesh", "--volume", &p("vol/mean_mu_c.f32"), "--out", &p("vol")],
        vec![
            "eval", "--checkpoint", &p("train/checkpoint_final.f32"), "--data", &p("data/test"), "--samples", "128",
            "--mesh", &p("vol/mesh.ply"), "--scene", "branching-y", "--surface-samples", "20000", "--out", &p("eval"),
        ],
        vec!["info", &p("train/checkpoint_final.f32")],
    ]
    .into_iter()
    .map(|s| s.into_iter().map(String::from).collect())
    .collect();

    for step in steps {
        println!("$ dsa-field {}", step.join(" "));
        let cli = Cli::parse_from(std::iter::once("dsa-field".to_string()).chain(step));
        if let Err(e) = run(&cli) {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
