//! Datasets: a synthetic open-set task with held-out anomaly families, an
//! IDX loader for closed-set experiments, and seeded mini-batching.
//!
//! Normal images are smooth fields built from a few Gaussian blobs. An
//! anomaly is a normal background with one texture family blended in. The
//! test split's anomalies come only from families never used for training
//! or validation.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::MetricKind;
use crate::tensor::{Rng, Tensor};

/// Version of the texture library; bump when any family's procedure changes.
pub const FAMILY_LIBRARY_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    StripesLow,
    StripesHigh,
    Checkerboard,
    Ring,
    SaltNoise,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::StripesLow,
        Family::StripesHigh,
        Family::Checkerboard,
        Family::Ring,
        Family::SaltNoise,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub image_size: usize,
    pub channels: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Normal : anomalous sample ratio, applied to every split.
    pub class_ratio: [u32; 2],
    pub train_families: Vec<Family>,
    pub test_families: Vec<Family>,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            n_train: 300,
            n_val: 100,
            n_test: 300,
            class_ratio: [1, 1],
            train_families: vec![Family::StripesLow, Family::Checkerboard],
            test_families: vec![Family::StripesHigh, Family::Ring, Family::SaltNoise],
            noise_std: 0.03,
            seed: 0,
        }
    }
}

impl TaskConfig {
    /// Smallest image the default network accepts.
    pub const MIN_IMAGE_SIZE: usize = 8;

    pub fn validate(&self) -> Result<()> {
        if self.image_size < Self::MIN_IMAGE_SIZE {
            return Err(Error::config("task.image_size", format!("must be >= {}", Self::MIN_IMAGE_SIZE)));
        }
        if !matches!(self.channels, 1 | 3) {
            return Err(Error::config("task.channels", "must be 1 or 3"));
        }
        if self.class_ratio.contains(&0) {
            return Err(Error::config("task.class_ratio", "both parts must be >= 1"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("task.noise_std", "must be >= 0"));
        }
        if self.train_families.is_empty() {
            return Err(Error::config("task.train_families", "must not be empty"));
        }
        if self.test_families.is_empty() {
            return Err(Error::config("task.test_families", "must not be empty"));
        }
        let train: BTreeSet<_> = self.train_families.iter().collect();
        if let Some(f) = self.test_families.iter().find(|f| train.contains(f)) {
            return Err(Error::config(
                "task.test_families",
                format!("{f:?} is also a training family; test families must be held out"),
            ));
        }
        for (field, n) in [("task.n_train", self.n_train), ("task.n_val", self.n_val), ("task.n_test", self.n_test)] {
            let (normal, anomalous) = self.class_counts(n);
            if normal == 0 || anomalous == 0 {
                return Err(Error::config(field, format!("{n} samples leave a class empty")));
            }
        }
        Ok(())
    }

    /// (normal, anomalous) counts for a split of `n` samples.
    pub fn class_counts(&self, n: usize) -> (usize, usize) {
        let [a, b] = self.class_ratio.map(|v| v as usize);
        let normal = (n * a + (a + b) / 2) / (a + b);
        (normal, n - normal)
    }
}

/// One image with its label. `family` is `None` for normal samples and for
/// datasets without family structure.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub image: Tensor,
    pub label: usize,
    pub family: Option<Family>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Origin {
    Synthetic { seed: u64, config: TaskConfig, family_library_version: u32 },
    Idx { train_images: PathBuf, train_labels: PathBuf, test_images: PathBuf, test_labels: PathBuf, val_fraction: f64, seed: u64 },
}

/// Train / validation / test splits plus what the metric should be.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub origin: Origin,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub metric: MetricKind,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl Dataset {
    pub fn split(&self, name: SplitName) -> &[Sample] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    /// Anomaly families present in a split.
    pub fn families(&self, name: SplitName) -> BTreeSet<Family> {
        self.split(name).iter().filter_map(|s| s.family).collect()
    }

    /// Samples per class in a split.
    pub fn class_counts(&self, name: SplitName) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in self.split(name) {
            counts[s.label] += 1;
        }
        counts
    }

    /// Checks split disjointness by id and, for open-set data, that test
    /// anomaly families never occur in train or validation.
    pub fn check_open_set(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for name in SplitName::ALL {
            for s in self.split(name) {
                if !seen.insert(s.id) {
                    return Err(Error::Input(format!("sample id {} appears in more than one split", s.id)));
                }
            }
        }
        let known: BTreeSet<Family> = self.families(SplitName::Train).union(&self.families(SplitName::Val)).copied().collect();
        if let Some(f) = self.families(SplitName::Test).intersection(&known).next() {
            return Err(Error::Input(format!("test family {f:?} was seen during training")));
        }
        Ok(())
    }
}

/// Generates the synthetic open-set task described by `cfg`. All randomness
/// comes from `cfg.seed`.
pub fn generate_openset_task(cfg: &TaskConfig) -> Result<Dataset> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let mut next_id = 0u64;
    let mut make_split = |name: SplitName, n: usize, families: &[Family]| {
        let mut rng = root.derive(&format!("task/{}", name.as_str()));
        let (normal, anomalous) = cfg.class_counts(n);
        let mut out = Vec::with_capacity(n);
        for i in 0..normal + anomalous {
            let is_anomaly = i >= normal;
            let family = is_anomaly.then(|| families[(i - normal) % families.len()]);
            let image = render_sample(cfg, family, &mut rng);
            out.push(Sample {
                id: next_id,
                image,
                label: is_anomaly as usize,
                family,
            });
            next_id += 1;
        }
        out
    };
    let train = make_split(SplitName::Train, cfg.n_train, &cfg.train_families);
    let val = make_split(SplitName::Val, cfg.n_val, &cfg.train_families);
    let test = make_split(SplitName::Test, cfg.n_test, &cfg.test_families);
    let ds = Dataset {
        origin: Origin::Synthetic {
            seed: cfg.seed,
            config: cfg.clone(),
            family_library_version: FAMILY_LIBRARY_VERSION,
        },
        input_shape: [cfg.channels, cfg.image_size, cfg.image_size],
        num_classes: 2,
        metric: MetricKind::Auroc,
        train,
        val,
        test,
    };
    ds.check_open_set()?;
    Ok(ds)
}

fn render_sample(cfg: &TaskConfig, family: Option<Family>, rng: &mut Rng) -> Tensor {
    let size = cfg.image_size;
    let plane = size * size;
    let background = smooth_field(size, rng);
    let overlay = family.map(|f| {
        let strength = rng.uniform_in(0.35, 0.6);
        let (texture, mask) = texture(f, size, rng);
        (strength, texture, mask)
    });
    let mut data = Vec::with_capacity(cfg.channels * plane);
    for _ in 0..cfg.channels {
        let gain = if cfg.channels == 1 { 1.0 } else { rng.uniform_in(0.8, 1.2) };
        for p in 0..plane {
            let mut v = gain * background[p];
            if let Some((s, t, m)) = &overlay {
                let w = s * m[p];
                v = (1.0 - w) * v + w * t[p];
            }
            v += cfg.noise_std * rng.normal();
            // Stored at f32 precision so exports round-trip exactly.
            data.push(v.clamp(0.0, 1.0) as f32 as f64);
        }
    }
    Tensor::new(vec![cfg.channels, size, size], data).expect("finite pixels")
}

/// Sum of 3–6 Gaussian blobs, min-max scaled into [0.25, 0.75].
fn smooth_field(size: usize, rng: &mut Rng) -> Vec<f64> {
    let s = size as f64;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..3 + rng.below(4))
        .map(|_| (rng.uniform_in(0.0, s), rng.uniform_in(0.0, s), rng.uniform_in(s / 8.0, s / 3.0), rng.uniform_in(-1.0, 1.0)))
        .collect();
    let mut field = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let v: f64 = blobs
                .iter()
                .map(|&(cy, cx, sigma, amp)| {
                    let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    amp * (-r2 / (2.0 * sigma * sigma)).exp()
                })
                .sum();
            field.push(v);
        }
    }
    let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    field.iter().map(|v| 0.25 + 0.5 * (v - lo) / (hi - lo + 1e-12)).collect()
}

/// Texture values in [0, 1] and a blend mask in [0, 1].
fn texture(family: Family, size: usize, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    let s = size as f64;
    let n = size * size;
    let coords = || (0..size).flat_map(move |y| (0..size).map(move |x| (y as f64, x as f64)));
    match family {
        Family::StripesLow | Family::StripesHigh => {
            let cycles = if family == Family::StripesLow {
                rng.uniform_in(1.5, 3.0)
            } else {
                rng.uniform_in(s / 4.0, s / 3.0)
            };
            let theta = rng.uniform_in(0.0, std::f64::consts::PI);
            let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
            let (c, sn) = (theta.cos(), theta.sin());
            let t = coords()
                .map(|(y, x)| 0.5 + 0.5 * (std::f64::consts::TAU * cycles * (x * c + y * sn) / s + phase).sin())
                .collect();
            (t, vec![1.0; n])
        }
        Family::Checkerboard => {
            let cell = 2 + rng.below(3);
            let (oy, ox) = (rng.below(cell), rng.below(cell));
            let t = (0..size)
                .flat_map(|y| (0..size).map(move |x| (((y + oy) / cell + (x + ox) / cell) % 2) as f64))
                .collect();
            (t, vec![1.0; n])
        }
        Family::Ring => {
            let (cy, cx) = (rng.uniform_in(0.3 * s, 0.7 * s), rng.uniform_in(0.3 * s, 0.7 * s));
            let radius = rng.uniform_in(s / 6.0, s / 3.0);
            let width = rng.uniform_in(1.5, 3.0);
            let t = coords()
                .map(|(y, x)| {
                    let r = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                    (-(r - radius).powi(2) / (2.0 * width * width)).exp()
                })
                .collect();
            (t, vec![1.0; n])
        }
        Family::SaltNoise => {
            let patch = size / 2;
            let (py, px) = (rng.below(size - patch + 1), rng.below(size - patch + 1));
            let mut t = vec![0.0; n];
            let mut mask = vec![0.0; n];
            for y in py..py + patch {
                for x in px..px + patch {
                    let u = rng.uniform();
                    if u < 0.35 {
                        t[y * size + x] = 1.0;
                        mask[y * size + x] = 1.0;
                    } else if u < 0.5 {
                        mask[y * size + x] = 1.0;
                    }
                }
            }
            (t, mask)
        }
    }
}

/// A mini-batch: `B×C×H×W` images, labels and sample ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
}

/// One epoch over a split in a seeded random order. The final partial
/// batch is kept.
pub struct Batches<'a> {
    split: &'a [Sample],
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batches<'a>(split: &'a [Sample], batch_size: usize, rng: &mut Rng) -> Result<Batches<'a>> {
    if split.is_empty() {
        return Err(Error::Input("cannot batch an empty split".into()));
    }
    if batch_size == 0 {
        return Err(Error::Input("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..split.len()).collect();
    rng.shuffle(&mut order);
    Ok(Batches {
        split,
        order,
        batch_size,
        pos: 0,
    })
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let picked: Vec<&Sample> = self.order[self.pos..end].iter().map(|&i| &self.split[i]).collect();
        self.pos = end;
        Some(stack(&picked))
    }
}

/// Stacks samples of identical shape into one batch.
pub fn stack(samples: &[&Sample]) -> Batch {
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(samples[0].image.shape());
    let data = samples.iter().flat_map(|s| s.image.data().iter().copied()).collect();
    Batch {
        images: Tensor::new(shape, data).expect("samples share a shape"),
        labels: samples.iter().map(|s| s.label).collect(),
        ids: samples.iter().map(|s| s.id).collect(),
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(offset as u64, format!("truncated {what}")))
}

/// Parses IDX image (`0x00000803`) and label (`0x00000801`) files. Pixels
/// are scaled to [0, 1]; each image is `1×rows×cols`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Vec<(Tensor, u8)>> {
    let magic = be_u32(images, 0, "image header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(0, format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let count = be_u32(images, 4, "image header")? as usize;
    let rows = be_u32(images, 8, "image header")? as usize;
    let cols = be_u32(images, 12, "image header")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::format(8, "zero image extent"));
    }
    let lmagic = be_u32(labels, 0, "label header")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::format(0, format!("label magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let lcount = be_u32(labels, 4, "label header")? as usize;
    if lcount != count {
        return Err(Error::format(4, format!("{count} images but {lcount} labels")));
    }
    let plane = rows * cols;
    let need = 16 + count * plane;
    if images.len() < need {
        return Err(Error::format(images.len() as u64, format!("image data truncated, expected {need} bytes")));
    }
    if images.len() > need {
        return Err(Error::format(need as u64, "trailing bytes after image data"));
    }
    if labels.len() != 8 + count {
        return Err(Error::format(labels.len().min(8 + count) as u64, format!("label data should be {} bytes", 8 + count)));
    }
    Ok((0..count)
        .map(|i| {
            let px = &images[16 + i * plane..16 + (i + 1) * plane];
            let data = px.iter().map(|&p| p as f64 / 255.0).collect();
            (Tensor::new(vec![1, rows, cols], data).expect("finite pixels"), labels[8 + i])
        })
        .collect())
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Vec<(Tensor, u8)>> {
    let images = std::fs::read(images_path.as_ref()).map_err(|e| Error::io(images_path.as_ref(), e))?;
    let labels = std::fs::read(labels_path.as_ref()).map_err(|e| Error::io(labels_path.as_ref(), e))?;
    parse_idx(&images, &labels)
}

/// Writes raw 8-bit images as an IDX image file.
pub fn write_idx_images(out: &mut impl Write, images: &[Vec<u8>], rows: usize, cols: usize) -> std::io::Result<()> {
    out.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    for v in [images.len(), rows, cols] {
        out.write_all(&(v as u32).to_be_bytes())?;
    }
    for img in images {
        assert_eq!(img.len(), rows * cols, "image size mismatch");
        out.write_all(img)?;
    }
    Ok(())
}

pub fn write_idx_labels(out: &mut impl Write, labels: &[u8]) -> std::io::Result<()> {
    out.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    out.write_all(&(labels.len() as u32).to_be_bytes())?;
    out.write_all(labels)
}

/// Closed-set dataset from IDX files. A seeded `val_fraction` of the
/// training file becomes the validation split.
pub fn idx_dataset(
    train_images: &Path,
    train_labels: &Path,
    test_images: &Path,
    test_labels: &Path,
    val_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::config("task.val_fraction", "must be in [0, 1)"));
    }
    let mut train_raw = load_idx(train_images, train_labels)?;
    let test_raw = load_idx(test_images, test_labels)?;
    if train_raw.is_empty() || test_raw.is_empty() {
        return Err(Error::Input("IDX splits must be non-empty".into()));
    }
    let shape = train_raw[0].0.shape().to_vec();
    if test_raw[0].0.shape() != shape.as_slice() {
        return Err(Error::Dimension("train and test images differ in size".into()));
    }
    let num_classes = train_raw.iter().chain(&test_raw).map(|(_, l)| *l as usize).max().unwrap_or(0) + 1;
    Rng::new(seed).derive("idx/val").shuffle(&mut train_raw);
    let n_val = ((train_raw.len() as f64) * val_fraction).round() as usize;
    let n_val = n_val.clamp(1, train_raw.len().saturating_sub(1).max(1));
    let to_samples = |raw: Vec<(Tensor, u8)>, first_id: u64| -> Vec<Sample> {
        raw.into_iter()
            .enumerate()
            .map(|(i, (image, label))| Sample {
                id: first_id + i as u64,
                image,
                label: label as usize,
                family: None,
            })
            .collect()
    };
    let val_raw = train_raw.split_off(train_raw.len() - n_val);
    let n_train = train_raw.len() as u64;
    let n_val_ids = val_raw.len() as u64;
    Ok(Dataset {
        origin: Origin::Idx {
            train_images: train_images.to_path_buf(),
            train_labels: train_labels.to_path_buf(),
            test_images: test_images.to_path_buf(),
            test_labels: test_labels.to_path_buf(),
            val_fraction,
            seed,
        },
        input_shape: [shape[0], shape[1], shape[2]],
        num_classes,
        metric: MetricKind::Accuracy,
        train: to_samples(train_raw, 0),
        val: to_samples(val_raw, n_train),
        test: to_samples(test_raw, n_train + n_val_ids),
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "near-ortho-task";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    origin: Origin,
    input_shape: [usize; 3],
    num_classes: usize,
    metric: MetricKind,
    splits: Vec<SplitManifest>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitManifest {
    name: SplitName,
    file: String,
    ids: Vec<u64>,
    labels: Vec<usize>,
    families: Vec<Option<Family>>,
}

/// Writes `manifest.json` plus one raw little-endian `f32` file per split
/// (images concatenated in manifest order).
pub fn export_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut splits = Vec::new();
    for name in SplitName::ALL {
        let samples = ds.split(name);
        let file = format!("{}.f32", name.as_str());
        let mut bytes = Vec::with_capacity(samples.iter().map(|s| s.image.len() * 4).sum());
        for s in samples {
            for &v in s.image.data() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let path = dir.join(&file);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        splits.push(SplitManifest {
            name,
            file,
            ids: samples.iter().map(|s| s.id).collect(),
            labels: samples.iter().map(|s| s.label).collect(),
            families: samples.iter().map(|s| s.family).collect(),
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        origin: ds.origin.clone(),
        input_shape: ds.input_shape,
        num_classes: ds.num_classes,
        metric: ds.metric,
        splits,
    };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

/// Reads a dataset written by [`export_dataset`]. `path` may be the manifest
/// file or its directory.
pub fn import_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let (dir, manifest_path) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
    };
    let text = std::fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
        return Err(Error::Input(format!("unsupported manifest {} v{}", manifest.format, manifest.version)));
    }
    let per_image: usize = manifest.input_shape.iter().product();
    let mut ds = Dataset {
        origin: manifest.origin,
        input_shape: manifest.input_shape,
        num_classes: manifest.num_classes,
        metric: manifest.metric,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for split in manifest.splits {
        let n = split.ids.len();
        if split.labels.len() != n || split.families.len() != n {
            return Err(Error::Input(format!("split {:?}: ids, labels and families differ in length", split.name)));
        }
        let file = dir.join(&split.file);
        let bytes = std::fs::read(&file).map_err(|e| Error::io(&file, e))?;
        if bytes.len() != n * per_image * 4 {
            return Err(Error::format(bytes.len() as u64, format!("{} should hold {} bytes", split.file, n * per_image * 4)));
        }
        let mut samples = Vec::with_capacity(n);
        for (i, chunk) in bytes.chunks_exact(per_image * 4).enumerate() {
            let data = chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
            let image = Tensor::new(manifest.input_shape.to_vec(), data)
                .map_err(|e| Error::format((i * per_image * 4) as u64, e.to_string()))?;
            if split.labels[i] >= ds.num_classes {
                return Err(Error::Input(format!("label {} out of range", split.labels[i])));
            }
            samples.push(Sample {
                id: split.ids[i],
                image,
                label: split.labels[i],
                family: split.families[i],
            });
        }
        match split.name {
            SplitName::Train => ds.train = samples,
            SplitName::Val => ds.val = samples,
            SplitName::Test => ds.test = samples,
        }
    }
    ds.check_open_set()?;
    Ok(ds)
}
