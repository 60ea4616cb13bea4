//! Images, the synthetic shapes corpus, and manifest ingestion.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::RgbImage;
use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::exec::Execution;

/// `B x H x W x 3` pixels in `[-1, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub data: Vec<f32>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageBatch {
    pub fn new(data: Vec<f32>, batch: usize, height: usize, width: usize) -> Result<Self> {
        if data.len() != batch * height * width * 3 {
            return Err(shape_err(format!(
                "{} values for a {batch}x{height}x{width}x3 batch",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(Self {
            data,
            batch,
            height,
            width,
        })
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.data,
            (self.batch, self.height, self.width, 3),
            device,
        )?)
    }

    /// Clamps into `[-1, 1]`; used on decoder outputs.
    pub fn from_tensor_clamped(t: &Tensor) -> Result<Self> {
        let (batch, height, width, c) = t.dims4()?;
        if c != 3 {
            return Err(shape_err(format!("expected 3 channels, got {c}")));
        }
        let data = t
            .to_dtype(candle_core::DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) })
            .collect();
        Ok(Self {
            data,
            batch,
            height,
            width,
        })
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        Self {
            data,
            batch: idx.len(),
            height: self.height,
            width: self.width,
        }
    }

    pub fn to_rgb(&self, i: usize) -> RgbImage {
        let px = self.image(i);
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let o = (y as usize * self.width + x as usize) * 3;
            let c = |v: f32| (((v + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8;
            image::Rgb([c(px[o]), c(px[o + 1]), c(px[o + 2])])
        })
    }

    /// Tiles the batch into a grid image with `cols` columns.
    pub fn grid(&self, cols: usize) -> RgbImage {
        let cols = cols.max(1);
        let rows = self.batch.div_ceil(cols);
        let mut out = RgbImage::new((cols * self.width) as u32, (rows * self.height) as u32);
        for i in 0..self.batch {
            let tile = self.to_rgb(i);
            let (ox, oy) = ((i % cols) * self.width, (i / cols) * self.height);
            image::imageops::replace(&mut out, &tile, ox as i64, oy as i64);
        }
        out
    }
}

fn rgb_to_pixels(img: &RgbImage) -> Vec<f32> {
    img.as_raw().iter().map(|&v| v as f32 / 127.5 - 1.0).collect()
}

/// Labelled images held in memory at a common size.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: ImageBatch,
    pub labels: Vec<u32>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: self.images.select(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Epoch order: a seeded permutation of all indices.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order
    }

    /// Batches of one epoch in seeded order; the last batch may be short.
    pub fn epoch_batches(&self, batch: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
        self.epoch_order(seed, epoch)
            .chunks(batch.max(1))
            .map(|c| c.to_vec())
            .collect()
    }
}

/// Endless stream of full training batches, reshuffled every epoch and
/// addressable by step so a resumed run sees the same data.
#[derive(Clone, Debug)]
pub struct BatchStream {
    batch: usize,
    seed: u64,
    len: usize,
}

impl BatchStream {
    pub fn new(len: usize, batch: usize, seed: u64) -> Result<Self> {
        if len == 0 || batch == 0 {
            return Err(Error::InvalidArgument("empty dataset or zero batch size".into()));
        }
        Ok(Self { batch, seed, len })
    }

    /// Indices for global step `step`. Batches wrap across epoch ends.
    pub fn indices(&self, step: usize) -> Vec<usize> {
        let start = step * self.batch;
        let mut out = Vec::with_capacity(self.batch);
        let mut cached: Option<(usize, Vec<usize>)> = None;
        for g in start..start + self.batch {
            let epoch = g / self.len;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, self.order(epoch as u64)));
            }
            out.push(cached.as_ref().unwrap().1[g % self.len]);
        }
        out
    }

    fn order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order
    }
}

// ---------------------------------------------------------------------------
// Synthetic shapes

pub const SHAPE_CLASSES: [&str; 10] = [
    "disc", "square", "triangle", "ring", "cross", "diamond", "hbar", "vbar", "frame", "dots",
];

fn inside(class: usize, u: f32, v: f32) -> bool {
    // (u, v) in shape-local coordinates, the shape filling [-1, 1]^2.
    let r2 = u * u + v * v;
    match class {
        0 => r2 <= 1.0,
        1 => u.abs() <= 0.8 && v.abs() <= 0.8,
        2 => (-0.9..=0.8).contains(&v) && u.abs() <= (v + 0.9) * 0.55,
        3 => (0.45..=1.0).contains(&r2),
        4 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        5 => u.abs() + v.abs() <= 1.0,
        6 => u.abs() <= 1.0 && v.abs() <= 0.35,
        7 => v.abs() <= 1.0 && u.abs() <= 0.35,
        8 => {
            let outer = u.abs() <= 0.95 && v.abs() <= 0.95;
            let inner = u.abs() <= 0.55 && v.abs() <= 0.55;
            outer && !inner
        }
        _ => {
            let d1 = (u + 0.5).powi(2) + (v + 0.5).powi(2);
            let d2 = (u - 0.5).powi(2) + (v - 0.5).powi(2);
            d1 <= 0.2 || d2 <= 0.2
        }
    }
}

/// Renders shape `index` of the corpus seeded by `seed`.
pub fn render_shape(seed: u64, index: u64, size: usize) -> (Vec<f32>, u32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ index);
    let class = rng.random_range(0..SHAPE_CLASSES.len());
    let bg: [f32; 3] = std::array::from_fn(|_| rng.random_range(-1.0..-0.2));
    let fg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    let scale = rng.random_range(0.25..0.42) * size as f32;
    let cx = rng.random_range(scale * 0.9..size as f32 - scale * 0.9);
    let cy = rng.random_range(scale * 0.9..size as f32 - scale * 0.9);
    let mut px = vec![0f32; size * size * 3];
    // 2x2 supersampling for soft edges.
    for y in 0..size {
        for x in 0..size {
            let mut cover = 0.0f32;
            for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let u = (x as f32 + sx - cx) / scale;
                let v = (y as f32 + sy - cy) / scale;
                if inside(class, u, v) {
                    cover += 0.25;
                }
            }
            let o = (y * size + x) * 3;
            for c in 0..3 {
                px[o + c] = bg[c] * (1.0 - cover) + fg[c] * cover;
            }
        }
    }
    (px, class as u32)
}

/// Deterministic synthetic corpus; item `i` depends only on `(seed, i)`.
pub fn synthetic_dataset(seed: u64, offset: u64, count: usize, size: usize, exec: Execution) -> Dataset {
    let items = exec.map_range(count, |i| render_shape(seed, offset + i as u64, size));
    let mut data = Vec::with_capacity(count * size * size * 3);
    let mut labels = Vec::with_capacity(count);
    for (px, label) in items {
        data.extend(px);
        labels.push(label);
    }
    Dataset {
        images: ImageBatch {
            data,
            batch: count,
            height: size,
            width: size,
        },
        labels,
        num_classes: SHAPE_CLASSES.len(),
    }
}

/// Train/validation split of the synthetic corpus; disjoint index ranges.
pub fn synthetic_splits(seed: u64, train: usize, val: usize, size: usize, exec: Execution) -> (Dataset, Dataset) {
    (
        synthetic_dataset(seed, 0, train, size, exec),
        synthetic_dataset(seed, 1 << 32, val, size, exec),
    )
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Paths in entries are relative to this directory.
    pub root: PathBuf,
    pub num_classes: usize,
    pub train: Vec<ManifestEntry>,
    #[serde(default)]
    pub val: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.root.is_relative() {
            if let Some(dir) = path.parent() {
                m.root = dir.join(&m.root);
            }
        }
        for e in m.train.iter().chain(&m.val) {
            if e.label as usize >= m.num_classes {
                return Err(Error::Format(format!("{}: label {} >= num_classes", e.path, e.label)));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Crop {
    Center,
    /// Random crop plus a coin-flip horizontal mirror.
    Random,
}

#[derive(Clone, Debug)]
pub struct IngestOptions {
    pub resize_shorter_edge: usize,
    pub crop_size: usize,
    pub crop: Crop,
    pub seed: u64,
}

/// Ingestion outcome: the decoded dataset and how many entries were skipped.
#[derive(Clone, Debug)]
pub struct Ingested {
    pub dataset: Dataset,
    pub skipped: usize,
}

fn preprocess(img: RgbImage, opts: &IngestOptions, rng: &mut ChaCha8Rng) -> RgbImage {
    let (w, h) = img.dimensions();
    let short = w.min(h) as f64;
    let s = opts.resize_shorter_edge as f64 / short;
    let nw = ((w as f64 * s).round() as u32).max(opts.resize_shorter_edge as u32);
    let nh = ((h as f64 * s).round() as u32).max(opts.resize_shorter_edge as u32);
    let resized = image::imageops::resize(&img, nw, nh, FilterType::Triangle);
    let c = opts.crop_size as u32;
    let (x0, y0, flip) = match opts.crop {
        Crop::Center => ((nw - c) / 2, (nh - c) / 2, false),
        Crop::Random => (
            rng.random_range(0..=nw - c),
            rng.random_range(0..=nh - c),
            rng.random_bool(0.5),
        ),
    };
    let mut out = image::imageops::crop_imm(&resized, x0, y0, c, c).to_image();
    if flip {
        image::imageops::flip_horizontal_in_place(&mut out);
    }
    out
}

/// Decodes and preprocesses `entries`. Unreadable files are logged, counted
/// and skipped. Item `i`'s augmentation depends only on `(seed, i)`.
pub fn ingest(
    root: &Path,
    entries: &[ManifestEntry],
    num_classes: usize,
    opts: &IngestOptions,
    exec: Execution,
) -> Result<Ingested> {
    if opts.crop_size == 0 || opts.resize_shorter_edge < opts.crop_size {
        return Err(Error::InvalidArgument(
            "resize_shorter_edge must be at least crop_size > 0".into(),
        ));
    }
    let decoded = exec.map_range(entries.len(), |i| {
        let e = &entries[i];
        let path = root.join(&e.path);
        match image::open(&path) {
            Ok(img) => {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (i as u64).wrapping_mul(0x9E37_79B9));
                Some((rgb_to_pixels(&preprocess(img.to_rgb8(), opts, &mut rng)), e.label))
            }
            Err(err) => {
                warn!("skipping {}: {err}", path.display());
                None
            }
        }
    });
    let skipped = decoded.iter().filter(|d| d.is_none()).count();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (px, label) in decoded.into_iter().flatten() {
        data.extend(px);
        labels.push(label);
    }
    let n = labels.len();
    Ok(Ingested {
        dataset: Dataset {
            images: ImageBatch {
                data,
                batch: n,
                height: opts.crop_size,
                width: opts.crop_size,
            },
            labels,
            num_classes,
        },
        skipped,
    })
}

/// Writes a slice of the synthetic corpus as PNGs plus a manifest.
pub fn write_synthetic_dataset(
    dir: &Path,
    seed: u64,
    train: usize,
    val: usize,
    size: usize,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir.join("images"))?;
    let (tr, va) = synthetic_splits(seed, train, val, size, Execution::default());
    let write = |set: &Dataset, split: &str| -> Result<Vec<ManifestEntry>> {
        (0..set.len())
            .map(|i| {
                let rel = format!("images/{split}_{i:05}.png");
                set.images.to_rgb(i).save(dir.join(&rel))?;
                Ok(ManifestEntry {
                    path: rel,
                    label: set.labels[i],
                })
            })
            .collect()
    };
    let manifest = DatasetManifest {
        root: PathBuf::from("."),
        num_classes: SHAPE_CLASSES.len(),
        train: write(&tr, "train")?,
        val: write(&va, "val")?,
    };
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let a = synthetic_dataset(3, 0, 20, 16, Execution::Parallel);
        let b = synthetic_dataset(3, 0, 20, 16, Execution::Sequential);
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        assert!(a.images.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        let classes: std::collections::BTreeSet<_> = synthetic_dataset(3, 0, 200, 16, Execution::Parallel)
            .labels
            .into_iter()
            .collect();
        assert_eq!(classes.len(), 10);
    }

    #[test]
    fn batches_split_by_arithmetic() {
        let ds = synthetic_dataset(0, 0, 100, 8, Execution::Sequential);
        let sizes: Vec<usize> = ds.epoch_batches(32, 1, 0).iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![32, 32, 32, 4]);
        assert_eq!(ds.epoch_batches(32, 1, 0), ds.epoch_batches(32, 1, 0));
        assert_ne!(ds.epoch_order(1, 0), ds.epoch_order(1, 1));
    }

    #[test]
    fn stream_is_step_addressable() {
        let s = BatchStream::new(10, 4, 7).unwrap();
        let all: Vec<usize> = (0..5).flat_map(|t| s.indices(t)).collect();
        // Two full epochs: each index appears twice.
        for i in 0..10 {
            assert_eq!(all.iter().filter(|&&j| j == i).count(), 2);
        }
        assert_eq!(s.indices(3), s.indices(3));
    }

    #[test]
    fn ingest_skips_unreadable_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = write_synthetic_dataset(dir.path(), 1, 5, 2, 16).unwrap();
        std::fs::write(dir.path().join("images/bad.png"), b"not an image").unwrap();
        m.train.push(ManifestEntry {
            path: "images/bad.png".into(),
            label: 0,
        });
        m.save(dir.path().join("manifest.json")).unwrap();
        let m = DatasetManifest::load(dir.path().join("manifest.json")).unwrap();
        let opts = IngestOptions {
            resize_shorter_edge: 16,
            crop_size: 16,
            crop: Crop::Center,
            seed: 0,
        };
        let got = ingest(&m.root, &m.train, m.num_classes, &opts, Execution::Parallel).unwrap();
        assert_eq!(got.skipped, 1);
        assert_eq!(got.dataset.len(), 5);
        // PNG round trip quantises to 8 bits.
        let orig = synthetic_dataset(1, 0, 5, 16, Execution::Sequential);
        let err = got
            .dataset
            .images
            .data
            .iter()
            .zip(&orig.images.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        assert!(err <= 1.0 / 127.0, "{err}");
    }

    #[test]
    fn random_crop_is_seeded() {
        let img = RgbImage::from_fn(24, 20, |x, y| image::Rgb([x as u8 * 10, y as u8 * 10, 0]));
        let opts = IngestOptions {
            resize_shorter_edge: 20,
            crop_size: 16,
            crop: Crop::Random,
            seed: 0,
        };
        let a = preprocess(img.clone(), &opts, &mut ChaCha8Rng::seed_from_u64(5));
        let b = preprocess(img, &opts, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert_eq!(a.dimensions(), (16, 16));
    }
}
