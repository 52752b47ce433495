mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use common::{small_geometry, tiny_fields};
use dsa_field::hash_encoding::LevelSchedule;
use dsa_field::renderer::QuadratureConfig;
use dsa_field::trainer::TrainConfig;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsa-field"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    bin(args).status.code().unwrap()
}

/// Every file under `dir` with its bytes.
fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// phantom-gen, train, render, extract, mesh, eval and info on a tiny
/// problem, with each stage rerun to check that outputs are reproduced
/// byte for byte.
#[test]
fn pipeline_runs_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let geo = root.join("geometry.json");
    std::fs::write(&geo, serde_json::to_string(&small_geometry()).unwrap()).unwrap();
    let cfg = TrainConfig {
        ray_batch: 32,
        reg_points: 32,
        quad: QuadratureConfig { samples_per_ray: 8, jitter: true },
        fields: tiny_fields(false),
        schedule: LevelSchedule { initial_levels: 2, unlock_every: 2 },
        ..TrainConfig::desk()
    };
    let cfg_path = root.join("train.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();

    let data = root.join("data");
    let gen = [
        "phantom-gen", "--geometry", s(&geo), "--frames", "8", "--views", "4", "--gt-times", "0.5",
        "--gt-res", "32", "--out", s(&data),
    ];
    ok(&gen);
    let first = tree(&data);
    ok(&gen);
    assert_eq!(first, tree(&data));
    for f in ["train/manifest.json", "test/manifest.json", "scene.json", "ground_truth/mean_mu_c.f32"] {
        assert!(first.contains_key(f), "{f} missing");
    }

    let run = root.join("run");
    let train = [
        "--workers", "1", "train", "--data", &format!("{}/train", s(&data)), "--config", s(&cfg_path),
        "--iterations", "6", "--seed", "3", "--set", "lambda_reg=0.02", "--out", s(&run),
    ];
    ok(&train);
    let first = tree(&run);
    ok(&train);
    assert_eq!(first, tree(&run));
    assert_eq!(String::from_utf8_lossy(&first["loss.csv"]).lines().count(), 7);
    let ckpt = run.join("checkpoint_final.f32");

    let out = root.join("out");
    ok(&["render", "--checkpoint", s(&ckpt), "--frames", "1,8", "--samples", "16", "--kind", "static", "--out", s(&out)]);
    ok(&["extract", "--checkpoint", s(&ckpt), "--average", "--res", "12", "--out", s(&out)]);
    ok(&["extract", "--checkpoint", s(&ckpt), "--kind", "p", "--res", "12", "--out", s(&out)]);
    let gt = data.join("ground_truth/mean_mu_c.f32");
    ok(&["mesh", "--volume", s(&gt), "--out", s(&out), "--name", "gt.ply"]);
    let files = tree(&out);
    assert!(files.keys().any(|k| k.starts_with("render_static_f0008")));
    assert!(files.contains_key("mean_mu_c.f32") && files.contains_key("p.f32") && files.contains_key("gt.ply"));

    let ev = root.join("eval");
    ok(&[
        "eval", "--checkpoint", s(&ckpt), "--data", &format!("{}/test", s(&data)), "--samples", "16",
        "--mesh", s(&out.join("gt.ply")), "--scene", "branching-y", "--surface-samples", "4000", "--out", s(&ev),
    ]);
    let views = String::from_utf8(std::fs::read(ev.join("view_metrics.csv")).unwrap()).unwrap();
    assert_eq!(views.lines().filter(|l| !l.starts_with('#')).count(), 5);
    assert!(ev.join("mesh_metrics.csv").is_file());

    for target in [data.join("train"), ckpt, gt, out.join("gt.ply")] {
        assert!(!ok(&["info", s(&target)]).is_empty());
    }
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    // usage and configuration errors
    assert_eq!(code(&["no-such-command"]), 2);
    assert_eq!(code(&["train", "--out", s(&out)]), 2);
    assert_eq!(code(&["phantom-gen", "--gt-times", "2.0", "--out", s(&out)]), 2);
    assert_eq!(code(&["phantom-gen", "--scene", "unknown-scene", "--out", s(&out)]), 2);
    let data = dir.path().join("missing");
    assert_eq!(code(&["train", "--data", s(&data), "--set", "no.such.key=1", "--out", s(&out)]), 2);
    // data errors
    assert_eq!(code(&["train", "--data", s(&data), "--out", s(&out)]), 3);
    assert_eq!(code(&["info", s(&data.join("volume.f32"))]), 3);
}
