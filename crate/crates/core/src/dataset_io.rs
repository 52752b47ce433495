//! On-disk formats.
//!
//! Every binary payload is a single file: one line of JSON header terminated
//! by `\n`, followed by little-endian IEEE-754 `f32` values. The header
//! always carries `endianness`, `dtype` and `shape`, so a loader can reject a
//! payload instead of misreading it. Byte-level layouts are documented in
//! `docs/formats.md`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::fields::{FieldSet, FieldSetConfig, ParamBlock};
use crate::geometry::{FramePose, ScanGeometry};

pub const RAW_MAGIC: &str = "dsa-field-raw";
pub const RAW_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RawHeader {
    format: String,
    version: u32,
    endianness: String,
    dtype: String,
    shape: Vec<usize>,
    #[serde(default)]
    meta: Map<String, Value>,
}

/// Writes `data` with a JSON header. `shape` lists dimensions slowest-first.
pub fn write_raw(path: &Path, shape: &[usize], meta: Map<String, Value>, data: &[f32]) -> Result<()> {
    let count: usize = shape.iter().product();
    if count != data.len() {
        return Err(Error::InvalidArgument(format!(
            "shape {shape:?} holds {count} values but {} given",
            data.len()
        )));
    }
    let header = RawHeader {
        format: RAW_MAGIC.into(),
        version: RAW_VERSION,
        endianness: "little".into(),
        dtype: "f32".into(),
        shape: shape.to_vec(),
        meta,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let line = serde_json::to_string(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(line.len() + 1 + data.len() * 4);
    bytes.extend_from_slice(line.as_bytes());
    bytes.push(b'\n');
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a payload written by [`write_raw`]; returns `(shape, meta, data)`.
pub fn read_raw(path: &Path) -> Result<(Vec<usize>, Map<String, Value>, Vec<f32>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line).map_err(|e| Error::io(path, e))?;
    let header: RawHeader = serde_json::from_slice(&line)
        .map_err(|e| Error::Data(format!("{}: bad header: {e}", path.display())))?;
    if header.format != RAW_MAGIC {
        return Err(Error::Data(format!("{}: not a {RAW_MAGIC} file", path.display())));
    }
    if header.version != RAW_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported payload version {}",
            path.display(),
            header.version
        )));
    }
    if header.endianness != "little" || header.dtype != "f32" {
        return Err(Error::Data(format!(
            "{}: unsupported encoding {} {}",
            path.display(),
            header.endianness,
            header.dtype
        )));
    }
    let count: usize = header.shape.iter().product();
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != count * 4 {
        return Err(Error::Data(format!(
            "{}: expected {} payload bytes, found {}",
            path.display(),
            count * 4,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header.shape, header.meta, data))
}

/// Single-channel 2D image, row-major with column index fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub cols: usize,
    pub rows: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(cols: usize, rows: usize) -> Self {
        Self {
            cols,
            rows,
            data: vec![0.0; cols * rows],
        }
    }

    pub fn from_vec(cols: usize, rows: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != cols * rows {
            return Err(Error::InvalidArgument(format!(
                "{cols}x{rows} image needs {} values, got {}",
                cols * rows,
                data.len()
            )));
        }
        Ok(Self { cols, rows, data })
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, v: f32) {
        self.data[row * self.cols + col] = v;
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// 8-bit binary PGM, min-max normalized.
pub fn write_pgm(path: &Path, image: &Image) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let (lo, hi) = image.min_max();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{} {}\n255\n", image.cols, image.rows).into_bytes();
    bytes.extend(
        image
            .data
            .iter()
            .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub frame_index: usize,
    pub angle_deg: f64,
    pub t_norm: f64,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Phantom {
        scene: String,
        seed: u64,
        noise_sigma: f64,
    },
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub endianness: String,
    pub geometry: ScanGeometry,
    pub frames: Vec<FrameEntry>,
    pub units: String,
    pub provenance: Provenance,
}

impl DatasetManifest {
    pub fn new(geometry: ScanGeometry, poses: &[FramePose], provenance: Provenance) -> Self {
        let frames = poses
            .iter()
            .map(|p| FrameEntry {
                frame_index: p.frame_index,
                angle_deg: p.angle_rad.to_degrees(),
                t_norm: p.t_norm,
                file: frame_file_name(p.frame_index),
            })
            .collect();
        Self {
            schema_version: MANIFEST_VERSION,
            endianness: "little".into(),
            geometry,
            frames,
            units: "log-subtracted line integral of contrast attenuation (dimensionless)".into(),
            provenance,
        }
    }

    pub fn poses(&self) -> Vec<FramePose> {
        self.frames
            .iter()
            .map(|f| FramePose {
                frame_index: f.frame_index,
                angle_rad: f.angle_deg.to_radians(),
                t_norm: f.t_norm,
            })
            .collect()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.t_norm).collect()
    }

    /// Checks internal consistency (files are checked by [`load_dataset`]).
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "unsupported manifest schema version {} (expected {MANIFEST_VERSION})",
                self.schema_version
            )));
        }
        if self.endianness != "little" {
            return Err(Error::Data(format!("unsupported endianness {}", self.endianness)));
        }
        self.geometry
            .validate()
            .map_err(|e| Error::Data(format!("manifest geometry: {e}")))?;
        if self.frames.is_empty() {
            return Err(Error::Data("manifest lists no frames".into()));
        }
        for w in self.frames.windows(2) {
            if w[1].frame_index <= w[0].frame_index {
                return Err(Error::Data("frames must be sorted by index without repeats".into()));
            }
        }
        for f in &self.frames {
            let pose = self
                .geometry
                .pose_for_frame(f.frame_index)
                .map_err(|e| Error::Data(format!("frame {}: {e}", f.frame_index)))?;
            if (pose.t_norm - f.t_norm).abs() > 1e-9 {
                return Err(Error::Data(format!(
                    "frame {}: t_norm {} inconsistent with {} total frames",
                    f.frame_index, f.t_norm, self.geometry.num_frames_total
                )));
            }
        }
        Ok(())
    }
}

pub fn frame_file_name(frame_index: usize) -> String {
    format!("frame_{frame_index:04}.f32")
}

/// A projection stack with its manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn geometry(&self) -> &ScanGeometry {
        &self.manifest.geometry
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Keeps the frames whose positions (0-based within this dataset) are
    /// listed. Timestamps and angles are preserved.
    pub fn subset(&self, positions: &[usize]) -> Result<Dataset> {
        let mut frames = Vec::with_capacity(positions.len());
        let mut images = Vec::with_capacity(positions.len());
        for &p in positions {
            let f = self
                .manifest
                .frames
                .get(p)
                .ok_or_else(|| Error::InvalidArgument(format!("no frame at position {p}")))?;
            frames.push(f.clone());
            images.push(self.images[p].clone());
        }
        Ok(Dataset {
            manifest: DatasetManifest {
                frames,
                ..self.manifest.clone()
            },
            images,
        })
    }

    /// Splits into `(train, test)` keeping `views` uniformly spaced frames
    /// for training and the rest for testing.
    pub fn split_views(&self, views: usize) -> Result<(Dataset, Dataset)> {
        let n = self.len();
        if views == 0 || views > n {
            return Err(Error::InvalidArgument(format!(
                "cannot select {views} training views from {n} frames"
            )));
        }
        let train: Vec<usize> = (0..views).map(|i| i * n / views).collect();
        let test: Vec<usize> = (0..n).filter(|i| !train.contains(i)).collect();
        Ok((self.subset(&train)?, self.subset(&test)?))
    }
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let m = &dataset.manifest;
    m.validate()?;
    if dataset.images.len() != m.frames.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images for {} frames",
            dataset.images.len(),
            m.frames.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (f, img) in m.frames.iter().zip(&dataset.images) {
        if img.cols != m.geometry.det_cols || img.rows != m.geometry.det_rows {
            return Err(Error::InvalidArgument(format!(
                "frame {} is {}x{}, detector is {}x{}",
                f.frame_index, img.cols, img.rows, m.geometry.det_cols, m.geometry.det_rows
            )));
        }
        let mut meta = Map::new();
        meta.insert("kind".into(), "projection".into());
        meta.insert("frame_index".into(), f.frame_index.into());
        meta.insert("t_norm".into(), f.t_norm.into());
        meta.insert("angle_deg".into(), f.angle_deg.into());
        write_raw(&dir.join(&f.file), &[img.rows, img.cols], meta, &img.data)?;
        let preview = dir
            .join("preview")
            .join(Path::new(&f.file).with_extension("pgm"));
        write_pgm(&preview, img)?;
    }
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(m).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    // Check the version before the schema so newer files fail loudly.
    match value.get("schema_version").and_then(Value::as_u64) {
        Some(v) if v == MANIFEST_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Data(format!(
                "{}: unsupported manifest schema version {v}",
                path.display()
            )))
        }
        None => return Err(Error::Data(format!("{}: missing schema_version", path.display()))),
    }
    let manifest: DatasetManifest = serde_json::from_value(value)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let g = &manifest.geometry;
    let mut images = Vec::with_capacity(manifest.frames.len());
    for f in &manifest.frames {
        let path = dir.join(&f.file);
        if !path.is_file() {
            return Err(Error::Data(format!(
                "frame {} file missing: {}",
                f.frame_index,
                path.display()
            )));
        }
        let (shape, _, data) = read_raw(&path)?;
        if shape != [g.det_rows, g.det_cols] {
            return Err(Error::Data(format!(
                "{}: shape {shape:?} does not match detector {}x{}",
                path.display(),
                g.det_rows,
                g.det_cols
            )));
        }
        images.push(Image::from_vec(g.det_cols, g.det_rows, data)?);
    }
    Ok(Dataset { manifest, images })
}

pub fn save_image(path: &Path, image: &Image, meta: Map<String, Value>) -> Result<()> {
    write_raw(path, &[image.rows, image.cols], meta, &image.data)?;
    write_pgm(&path.with_extension("pgm"), image)
}

pub fn load_image(path: &Path) -> Result<Image> {
    let (shape, _, data) = read_raw(path)?;
    match shape.as_slice() {
        [rows, cols] => Image::from_vec(*cols, *rows, data),
        _ => Err(Error::Data(format!("{}: not a 2D image", path.display()))),
    }
}

/// Writes a JSON document, creating parent directories.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub const CHECKPOINT_KIND: &str = "dsa-field-checkpoint";

/// Trained model plus what is needed to read volumes out of it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub fields: FieldSet<f32>,
    pub iteration: u64,
    pub geometry: ScanGeometry,
    /// Normalized timestamps of the training frames, used for averaging.
    pub timestamps: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    fields: FieldSetConfig,
    active_levels: usize,
    iteration: u64,
    geometry: ScanGeometry,
    timestamps: Vec<f64>,
    blocks: Vec<(String, usize)>,
}

/// Writes all parameters as one flat payload; the header records the model
/// configuration and the block layout.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let f = &ckpt.fields;
    let meta = CheckpointMeta {
        kind: CHECKPOINT_KIND.into(),
        fields: f.config().clone(),
        active_levels: f.active_levels(),
        iteration: ckpt.iteration,
        geometry: ckpt.geometry.clone(),
        timestamps: ckpt.timestamps.clone(),
        blocks: ParamBlock::ALL.iter().map(|&b| (b.name().to_string(), f.block(b).len())).collect(),
    };
    let Value::Object(meta) = serde_json::to_value(meta).expect("meta serializes") else {
        unreachable!("struct serializes to an object")
    };
    let mut data = Vec::with_capacity(f.param_count());
    for b in ParamBlock::ALL {
        data.extend_from_slice(f.block(b));
    }
    write_raw(path, &[data.len()], meta, &data)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (_, meta, data) = read_raw(path)?;
    let bad = |msg: String| Error::Data(format!("{}: {msg}", path.display()));
    let meta: CheckpointMeta =
        serde_json::from_value(Value::Object(meta)).map_err(|e| bad(format!("bad checkpoint header: {e}")))?;
    if meta.kind != CHECKPOINT_KIND {
        return Err(bad(format!("not a checkpoint (kind '{}')", meta.kind)));
    }
    let mut fields = FieldSet::zeros(meta.fields).map_err(|e| bad(e.to_string()))?;
    let mut offset = 0;
    for (b, (name, len)) in ParamBlock::ALL.into_iter().zip(&meta.blocks) {
        if name != b.name() || *len != fields.block(b).len() || offset + len > data.len() {
            return Err(bad(format!("block layout mismatch at '{name}'")));
        }
        fields.block_mut(b).copy_from_slice(&data[offset..offset + len]);
        offset += len;
    }
    if meta.blocks.len() != ParamBlock::ALL.len() || offset != data.len() {
        return Err(bad("block layout does not cover the payload".into()));
    }
    fields.set_active_levels(meta.active_levels);
    Ok(Checkpoint {
        fields,
        iteration: meta.iteration,
        geometry: meta.geometry,
        timestamps: meta.timestamps,
    })
}
