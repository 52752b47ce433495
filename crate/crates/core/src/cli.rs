//! Command-line front end.
//!
//! Every subcommand writes its outputs under `--out` together with
//! `command.resolved.json`, a snapshot of the parsed arguments (and, for
//! `train`, the fully resolved training configuration). Training settings
//! are layered: preset, then `--config` file, then `--set key=value`
//! overrides, then the dedicated flags (`--seed`, `--iterations`,
//! `--workers`). Later layers win.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use crate::dataset_io::{
    load_checkpoint, load_dataset, load_manifest, read_json, read_raw, save_dataset, save_image, write_json, Checkpoint,
    MANIFEST_FILE,
};
use crate::error::{bail_arg, Error, Result};
use crate::geometry::ScanGeometry;
use crate::metrics::{chamfer_points, hausdorff_points, sample_mesh_surface, MetricReport};
use crate::phantom::{generate_dataset, ground_truth_volume, PhantomScene};
use crate::reconstructor::{
    average_volume, default_iso_level, extract_volume, load_volume, marching_cubes, read_ply, save_volume, write_ply,
    Lattice, VolumeImage, VolumeKind,
};
use crate::renderer::{render_image, FieldComponent, FieldIntegrand, QuadratureConfig};
use crate::trainer::{evaluate_views, train, TrainConfig};

#[derive(Debug, Parser, Serialize)]
#[command(name = "dsa-field", version, about = "Static/dynamic attenuation fields for rotational DSA")]
pub struct Cli {
    /// Worker threads (0: all available cores). One worker is bitwise
    /// reproducible.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Simulate a phantom acquisition and write train/test datasets.
    PhantomGen(PhantomGenArgs),
    /// Fit the field set to a dataset.
    Train(TrainArgs),
    /// Render projections from a checkpoint.
    Render(RenderArgs),
    /// Sample a field quantity on a voxel lattice.
    Extract(ExtractArgs),
    /// Extract an isosurface mesh from a volume.
    Mesh(MeshArgs),
    /// Score rendered views, meshes or volumes.
    Eval(EvalArgs),
    /// Describe a dataset, checkpoint, volume or mesh.
    Info(InfoArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct PhantomGenArgs {
    /// Built-in scene name (branching-y, fast-fill-y) or a scene JSON file.
    #[arg(long, default_value = "branching-y")]
    pub scene: String,
    /// Geometry preset (desk, clinical) or a geometry JSON file.
    #[arg(long, default_value = "desk")]
    pub geometry: String,
    /// Total frames in the sequence (default: the geometry's).
    #[arg(long)]
    pub frames: Option<usize>,
    /// Training views, spread evenly over the sequence; the rest are test
    /// views.
    #[arg(long, default_value_t = 30)]
    pub views: usize,
    /// Standard deviation of additive Gaussian noise.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Timestamps at which ground-truth volumes are written.
    #[arg(long, value_delimiter = ',')]
    pub gt_times: Vec<f64>,
    /// Ground-truth lattice resolution along the longest box side.
    #[arg(long, default_value_t = 128)]
    pub gt_res: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Base settings before the config file and overrides.
    #[arg(long, default_value = "desk", value_parser = ["desk", "paper"])]
    pub preset: String,
    /// JSON file with (a subset of) the training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set adam.lr0=1e-3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Frame indices (1-based) whose gantry poses are rendered.
    #[arg(long, value_delimiter = ',', required = true)]
    pub frames: Vec<usize>,
    /// Timestamp to render at (default: each frame's own).
    #[arg(long)]
    pub t: Option<f64>,
    /// full, static or dynamic.
    #[arg(long, default_value = "full")]
    pub kind: String,
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ExtractArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// mu_c, p, mu_s, mu_d, static_component or dynamic_component.
    #[arg(long, default_value = "mu_c")]
    pub kind: String,
    /// Timestamp for time-dependent kinds.
    #[arg(long)]
    pub t: Option<f64>,
    /// Average a time-dependent kind over the training timestamps.
    #[arg(long)]
    pub average: bool,
    /// Lattice resolution along the longest box side.
    #[arg(long, default_value_t = 128)]
    pub res: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MeshArgs {
    #[arg(long)]
    pub volume: PathBuf,
    /// Iso level (default: half the 99.9th percentile of the volume).
    #[arg(long)]
    pub iso: Option<f64>,
    /// Output file name inside `--out`.
    #[arg(long, default_value = "mesh.ply")]
    pub name: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Checkpoint whose renderings are scored against `--data`.
    #[arg(long, requires = "data")]
    pub checkpoint: Option<PathBuf>,
    /// Test dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    /// PSNR/SSIM data range (default: target max-min over the test set).
    #[arg(long)]
    pub data_range: Option<f64>,
    /// Mesh scored against `--reference` or the analytic `--scene` surface.
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub scene: Option<String>,
    /// Surface samples per mesh.
    #[arg(long, default_value_t = 100_000)]
    pub surface_samples: usize,
    /// Volume compared voxelwise against `--reference-volume`.
    #[arg(long, requires = "reference_volume")]
    pub volume: Option<PathBuf>,
    #[arg(long)]
    pub reference_volume: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct InfoArgs {
    /// Dataset directory, checkpoint, volume (`.f32`) or mesh (`.ply`).
    pub path: PathBuf,
}

/// Runs a parsed command line. Usage errors are reported by clap itself
/// (exit code 2) before this is reached.
pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.workers.filter(|&n| n > 0) {
        // ignore the error when a pool already exists (tests, repeated calls)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::PhantomGen(a) => phantom_gen(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Render(a) => render_cmd(cli, a),
        Command::Extract(a) => extract_cmd(cli, a),
        Command::Mesh(a) => mesh_cmd(cli, a),
        Command::Eval(a) => eval_cmd(cli, a),
        Command::Info(a) => info_cmd(a),
    }
}

fn snapshot(cli: &Cli, out: &Path, extra: Option<(&str, Value)>) -> Result<()> {
    let mut v = serde_json::to_value(cli).expect("arguments serialize");
    if let (Value::Object(map), Some((k, x))) = (&mut v, extra) {
        map.insert(k.into(), x);
    }
    write_json(&out.join("command.resolved.json"), &v)
}

pub fn load_scene(spec: &str) -> Result<PhantomScene> {
    let scene = match PhantomScene::builtin(spec) {
        Some(s) => s,
        None if Path::new(spec).is_file() => read_json(Path::new(spec))?,
        None => return Err(Error::Config(format!("unknown scene '{spec}' (not a built-in name or a file)"))),
    };
    scene.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(scene)
}

pub fn load_geometry(spec: &str) -> Result<ScanGeometry> {
    let g = match spec {
        "desk" => ScanGeometry::desk(),
        "clinical" => ScanGeometry::clinical(),
        path if Path::new(path).is_file() => read_json(Path::new(path))?,
        other => return Err(Error::Config(format!("unknown geometry '{other}'"))),
    };
    g.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(g)
}

fn phantom_gen(cli: &Cli, a: &PhantomGenArgs) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let mut geometry = load_geometry(&a.geometry)?;
    if let Some(n) = a.frames {
        geometry.num_frames_total = n;
    }
    geometry.aabb = scene.aabb;
    geometry.validate().map_err(|e| Error::Config(e.to_string()))?;
    if a.gt_times.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Config("ground-truth timestamps must lie in [0, 1]".into()));
    }
    let frames: Vec<usize> = (1..=geometry.num_frames_total).collect();
    let all = generate_dataset(&scene, &geometry, &frames, a.noise, a.seed, &a.scene)?;
    let (train_set, test_set) = all.split_views(a.views).map_err(|e| Error::Config(e.to_string()))?;
    save_dataset(&train_set, &a.out.join("train"))?;
    save_dataset(&test_set, &a.out.join("test"))?;
    write_json(&a.out.join("scene.json"), &scene)?;

    let lattice = Lattice::covering(&scene.aabb, a.gt_res)?;
    for &t in &a.gt_times {
        let v = ground_truth_volume(&scene, &lattice, t);
        save_volume(&a.out.join(format!("ground_truth/mu_c_t{t:.4}.f32")), &v)?;
    }
    // mean over the training timestamps: the reference for the averaged
    // reconstruction
    let ts = train_set.manifest.timestamps();
    let mut mean = vec![0.0f64; lattice.len()];
    for &t in &ts {
        for (m, v) in mean.iter_mut().zip(ground_truth_volume(&scene, &lattice, t).values) {
            *m += v as f64;
        }
    }
    let values = mean.iter().map(|m| (m / ts.len() as f64) as f32).collect();
    let mean = VolumeImage::new(lattice, values, "mean_ground_truth_mu_c", None);
    save_volume(&a.out.join("ground_truth/mean_mu_c.f32"), &mean)?;
    snapshot(cli, &a.out, None)?;
    println!(
        "wrote {} training and {} test frames to {}",
        train_set.len(),
        test_set.len(),
        a.out.display()
    );
    Ok(())
}

/// Applies `key.path=value` overrides to a JSON document. Values parse as
/// JSON when possible and as plain strings otherwise; unknown keys are
/// configuration errors.
pub fn apply_overrides(doc: &mut Value, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let Some((key, raw)) = item.split_once('=') else {
            return Err(Error::Config(format!("override '{item}' is not KEY=VALUE")));
        };
        let mut node = &mut *doc;
        for part in key.split('.') {
            node = node
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown configuration key '{key}'")))?;
        }
        *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    }
    Ok(())
}

/// Merges `patch` into `base` key by key (objects recurse, other values
/// replace).
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Resolves the training configuration from its layers.
pub fn resolve_train_config(
    preset: &str,
    file: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    iterations: Option<u64>,
    workers: Option<usize>,
) -> Result<TrainConfig> {
    let base = match preset {
        "desk" => TrainConfig::desk(),
        "paper" => TrainConfig::paper(),
        other => return Err(Error::Config(format!("unknown preset '{other}'"))),
    };
    let mut doc = serde_json::to_value(&base).expect("config serializes");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let patch: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut doc, patch);
    }
    apply_overrides(&mut doc, overrides)?;
    let mut cfg: TrainConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    if let Some(w) = workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(
        &a.preset,
        a.config.as_deref(),
        &a.overrides,
        a.seed,
        a.iterations,
        cli.workers,
    )?;
    let data = load_dataset(&a.data)?;
    snapshot(cli, &a.out, Some(("resolved_config", serde_json::to_value(&cfg).expect("serializes"))))?;
    let every = (cfg.iterations / 20).max(1);
    let outcome = train(data, &cfg, Some(&a.out), |r| {
        if (r.iteration + 1) % every == 0 {
            println!(
                "iter {:>7}  l1 {:.4e}  lreg {:.4e}  lr {:.2e}  levels {}",
                r.iteration + 1,
                r.l1,
                r.lreg,
                r.lr,
                r.active_levels
            );
        }
    })?;
    if let Some(p) = outcome.final_checkpoint_path {
        println!("final checkpoint: {}", p.display());
    }
    Ok(())
}

fn render_cmd(cli: &Cli, a: &RenderArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let component: FieldComponent = a.kind.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
    let quad = QuadratureConfig {
        samples_per_ray: a.samples,
        jitter: false,
    };
    quad.validate().map_err(|e| Error::Config(e.to_string()))?;
    if let Some(t) = a.t.filter(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Config(format!("timestamp {t} outside [0, 1]")));
    }
    let g = &ckpt.geometry;
    let integrand = FieldIntegrand {
        fields: &ckpt.fields,
        aabb: g.aabb,
        component,
    };
    for &frame in &a.frames {
        let pose = g.pose_for_frame(frame).map_err(|e| Error::Config(e.to_string()))?;
        let t = a.t.unwrap_or(pose.t_norm);
        let img = render_image(g, &pose, t, &integrand, &quad, 0);
        let mut meta = serde_json::Map::new();
        meta.insert("kind".into(), format!("render_{}", a.kind).into());
        meta.insert("frame_index".into(), frame.into());
        meta.insert("t_norm".into(), t.into());
        meta.insert("samples_per_ray".into(), a.samples.into());
        let path = a.out.join(format!("render_{}_f{frame:04}_t{t:.4}.f32", a.kind));
        save_image(&path, &img, meta)?;
        println!("{}", path.display());
    }
    snapshot(cli, &a.out, None)
}

fn extract_cmd(cli: &Cli, a: &ExtractArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let kind: VolumeKind = a.kind.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
    let aabb = ckpt.geometry.aabb;
    let lattice = Lattice::covering(&aabb, a.res).map_err(|e| Error::Config(e.to_string()))?;
    let (volume, name) = if a.average {
        let v = average_volume(&ckpt.fields, &lattice, &aabb, &ckpt.timestamps, kind)
            .map_err(|e| Error::Config(e.to_string()))?;
        (v, format!("mean_{}.f32", kind.name()))
    } else {
        let v = extract_volume(&ckpt.fields, &lattice, &aabb, kind, a.t).map_err(|e| Error::Config(e.to_string()))?;
        let name = match v.timestamp {
            Some(t) => format!("{}_t{t:.4}.f32", kind.name()),
            None => format!("{}.f32", kind.name()),
        };
        (v, name)
    };
    let path = a.out.join(name);
    save_volume(&path, &volume)?;
    println!("{}", path.display());
    snapshot(cli, &a.out, None)
}

fn mesh_cmd(cli: &Cli, a: &MeshArgs) -> Result<()> {
    let volume = load_volume(&a.volume)?;
    let (iso, rule) = match a.iso {
        Some(v) => (v, "given"),
        None => (default_iso_level(&volume), "0.5 * p99.9"),
    };
    let mesh = marching_cubes(&volume, iso);
    let path = a.out.join(&a.name);
    let comments = [
        ("iso".to_string(), format!("{iso}")),
        ("iso_rule".to_string(), rule.to_string()),
        ("source".to_string(), a.volume.display().to_string()),
    ];
    write_ply(&path, &mesh, &comments)?;
    println!(
        "{}: {} vertices, {} triangles, iso {iso:.6}",
        path.display(),
        mesh.vertices.len(),
        mesh.triangles.len()
    );
    snapshot(cli, &a.out, Some(("iso", iso.into())))
}

fn eval_cmd(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let mut did = false;
    if let (Some(ck), Some(data)) = (&a.checkpoint, &a.data) {
        did = true;
        let ckpt = load_checkpoint(ck)?;
        let test = load_dataset(data)?;
        if test.manifest.geometry.det_cols != ckpt.geometry.det_cols
            || test.manifest.geometry.det_rows != ckpt.geometry.det_rows
        {
            return Err(Error::Data("test set detector differs from the checkpoint's".into()));
        }
        let quad = QuadratureConfig {
            samples_per_ray: a.samples,
            jitter: false,
        };
        let (_, report) = evaluate_views(&ckpt.fields, &test, &quad, a.data_range)?;
        write_report(&a.out.join("view_metrics.csv"), &report)?;
        println!("{}", report.to_table());
    }
    if let Some(mesh_path) = &a.mesh {
        did = true;
        let mesh = read_ply(mesh_path)?;
        let pts = sample_mesh_surface(&mesh, a.surface_samples, a.seed)?;
        let reference: Vec<[f64; 3]> = match (&a.reference, &a.scene) {
            (Some(r), _) => sample_mesh_surface(&read_ply(r)?, a.surface_samples, a.seed)?,
            (None, Some(s)) => load_scene(s)?
                .sample_surface(a.surface_samples, a.seed)
                .iter()
                .map(|p| [p.x, p.y, p.z])
                .collect(),
            (None, None) => return Err(Error::Config("--mesh needs --reference or --scene".into())),
        };
        let mut report = MetricReport::new(&["chamfer_mm", "hausdorff_mm"]);
        report.meta.insert("surface_samples".into(), a.surface_samples.to_string());
        report.meta.insert("seed".into(), a.seed.to_string());
        report.push(
            mesh_path.display().to_string(),
            vec![chamfer_points(&pts, &reference)?, hausdorff_points(&pts, &reference)?],
        );
        write_report(&a.out.join("mesh_metrics.csv"), &report)?;
        println!("{}", report.to_table());
    }
    if let (Some(v), Some(r)) = (&a.volume, &a.reference_volume) {
        did = true;
        let (vol, reference) = (load_volume(v)?, load_volume(r)?);
        let mae = vol.mean_abs_diff(&reference).map_err(|e| Error::Data(e.to_string()))?;
        let mut report = MetricReport::new(&["mae"]);
        report.push(v.display().to_string(), vec![mae]);
        write_report(&a.out.join("volume_metrics.csv"), &report)?;
        println!("{}", report.to_table());
    }
    if !did {
        bail_arg!("nothing to evaluate: give --checkpoint/--data, --mesh or --volume/--reference-volume");
    }
    snapshot(cli, &a.out, None)
}

fn write_report(path: &Path, report: &MetricReport) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))
}

fn info_cmd(a: &InfoArgs) -> Result<()> {
    let p = &a.path;
    if p.is_dir() && p.join(MANIFEST_FILE).is_file() {
        let m = load_manifest(p)?;
        let g = &m.geometry;
        println!("dataset: {} frames of {}", m.frames.len(), g.num_frames_total);
        println!("detector: {}x{} at {}x{} mm", g.det_cols, g.det_rows, g.pitch_u_mm, g.pitch_v_mm);
        println!("sod/sdd: {}/{} mm, sweep {} deg", g.sod_mm, g.sdd_mm, g.angle_range_deg);
        println!("provenance: {}", serde_json::to_string(&m.provenance).expect("serializes"));
        return Ok(());
    }
    match p.extension().and_then(|e| e.to_str()) {
        Some("ply") => {
            let mesh = read_ply(p)?;
            println!("mesh: {} vertices, {} triangles", mesh.vertices.len(), mesh.triangles.len());
            println!(
                "area {:.3} mm^2, closed {}, euler characteristic {}",
                mesh.area(),
                mesh.is_closed(),
                mesh.euler_characteristic()
            );
        }
        Some("f32") => {
            let (shape, meta, _) = read_raw(p)?;
            if meta.get("kind").and_then(Value::as_str) == Some(crate::dataset_io::CHECKPOINT_KIND) {
                let Checkpoint { fields, iteration, timestamps, .. } = load_checkpoint(p)?;
                println!("checkpoint at iteration {iteration}: {} parameters", fields.param_count());
                println!("mode {:?}, active levels {}", fields.mode(), fields.active_levels());
                println!("{} training timestamps", timestamps.len());
            } else {
                println!("raw payload, shape {shape:?}");
                for (k, v) in &meta {
                    println!("  {k}: {v}");
                }
            }
        }
        _ => bail_arg!("cannot describe {}", p.display()),
    }
    Ok(())
}
