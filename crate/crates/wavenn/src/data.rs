//! Dataset ingestion and batching: IDX (MNIST-style) and CIFAR-10/100 binary
//! loaders, [0,1] normalization, light augmentation, and deterministic
//! per-epoch shuffling. Loaders never reorder samples; all shuffling happens
//! in `batches` from a (seed, epoch) pair.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::FeatureTensor;

/// Stream ids that carve one base seed into independent generators. Each
/// (seed, stream) pair is a separate keyed sequence, so epochs never share
/// randomness and a resumed run replays exactly the draws of an
/// uninterrupted one.
pub mod streams {
    /// Network weight initialization.
    pub const INIT: u64 = u64::MAX;

    /// Shuffle order for one epoch.
    pub fn shuffle(epoch: usize) -> u64 {
        2 * epoch as u64
    }

    /// Augmentation draws and per-sample dropout seeds for one epoch.
    pub fn draws(epoch: usize) -> u64 {
        2 * epoch as u64 + 1
    }
}

/// Pixel storage: loaders produce raw bytes, `normalize` converts once.
#[derive(Debug, Clone, PartialEq)]
enum Pixels {
    Raw(Vec<u8>),
    Normalized(Vec<f64>),
}

/// An image classification dataset. Images are stored channel-major per
/// sample (each channel a contiguous h*w plane), the same layout
/// `FeatureTensor` uses.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    height: usize,
    width: usize,
    channels: usize,
    class_count: usize,
    labels: Vec<usize>,
    pixels: Pixels,
}

impl Dataset {
    pub fn from_raw(
        height: usize,
        width: usize,
        channels: usize,
        class_count: usize,
        pixels: Vec<u8>,
        labels: Vec<usize>,
    ) -> Result<Dataset> {
        let per_image = height * width * channels;
        if per_image == 0 {
            return Err(Error::Data("image dimensions must be nonzero".into()));
        }
        if pixels.len() != per_image * labels.len() {
            return Err(Error::Data(format!(
                "{} pixels cannot hold {} images of {per_image} bytes",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Dataset {
            height,
            width,
            channels,
            class_count,
            labels,
            pixels: Pixels::Raw(pixels),
        })
    }

    /// Already-normalized samples, for synthetic fixtures and smoke tests.
    pub fn from_normalized(
        height: usize,
        width: usize,
        channels: usize,
        class_count: usize,
        pixels: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Dataset> {
        let per_image = height * width * channels;
        if per_image == 0 {
            return Err(Error::Data("image dimensions must be nonzero".into()));
        }
        if pixels.len() != per_image * labels.len() {
            return Err(Error::Data(format!(
                "{} values cannot hold {} images of {per_image} entries",
                pixels.len(),
                labels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::Data("pixel values must be finite".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Dataset {
            height,
            width,
            channels,
            class_count,
            labels,
            pixels: Pixels::Normalized(pixels),
        })
    }

    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn is_normalized(&self) -> bool {
        matches!(self.pixels, Pixels::Normalized(_))
    }

    /// Scale raw bytes to [0, 1]. Calling it twice is an error, not a silent
    /// second rescale.
    pub fn normalize(self) -> Result<Dataset> {
        match self.pixels {
            Pixels::Normalized(_) => Err(Error::State("dataset is already normalized".into())),
            Pixels::Raw(bytes) => Ok(Dataset {
                pixels: Pixels::Normalized(bytes.iter().map(|&b| b as f64 / 255.0).collect()),
                ..self
            }),
        }
    }

    /// Keep only the first `n` samples (loader order).
    pub fn truncate(&mut self, n: usize) {
        let per_image = self.height * self.width * self.channels;
        let keep = n.min(self.labels.len());
        self.labels.truncate(keep);
        match &mut self.pixels {
            Pixels::Raw(v) => v.truncate(keep * per_image),
            Pixels::Normalized(v) => v.truncate(keep * per_image),
        }
    }

    /// Raw bytes of one image, channel-major; for fixtures and tests.
    pub fn raw_image(&self, index: usize) -> Result<&[u8]> {
        let per_image = self.height * self.width * self.channels;
        match &self.pixels {
            Pixels::Normalized(_) => Err(Error::State("dataset is normalized; raw bytes are gone".into())),
            Pixels::Raw(v) => {
                if index >= self.labels.len() {
                    return Err(Error::InvalidParameter(format!(
                        "image index {index} out of range for {} samples",
                        self.labels.len()
                    )));
                }
                Ok(&v[index * per_image..(index + 1) * per_image])
            }
        }
    }

    pub fn image(&self, index: usize) -> Result<FeatureTensor> {
        if index >= self.labels.len() {
            return Err(Error::InvalidParameter(format!(
                "image index {index} out of range for {} samples",
                self.labels.len()
            )));
        }
        let per_image = self.height * self.width * self.channels;
        match &self.pixels {
            Pixels::Raw(_) => Err(Error::State("normalize the dataset before using images".into())),
            Pixels::Normalized(v) => FeatureTensor::from_vec(
                self.height,
                self.width,
                self.channels,
                v[index * per_image..(index + 1) * per_image].to_vec(),
            ),
        }
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    /// Mean over every pixel of every (normalized) sample.
    pub fn pixel_mean(&self) -> Result<f64> {
        match &self.pixels {
            Pixels::Raw(_) => Err(Error::State("normalize the dataset before taking statistics".into())),
            Pixels::Normalized(v) => {
                if v.is_empty() {
                    return Err(Error::Data("empty dataset has no mean".into()));
                }
                Ok(v.iter().sum::<f64>() / v.len() as f64)
            }
        }
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Data(format!(
            "{}: truncated header, needed 4 bytes at offset {offset} but file ends at {}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Parse an IDX image file: returns (count, rows, cols, pixel bytes).
fn parse_idx_images(images_path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let img = read_file(images_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Data(format!(
            "{}: expected image magic 0x{IDX_IMAGE_MAGIC:08x} at offset 0, found 0x{magic:08x}",
            images_path.display()
        )));
    }
    let count = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let want = 16 + count * rows * cols;
    if img.len() != want {
        return Err(Error::Data(format!(
            "{}: header declares {count} images of {rows}x{cols} ({want} bytes total) but the file has {} bytes",
            images_path.display(),
            img.len()
        )));
    }
    let mut pixels = img;
    pixels.drain(..16);
    Ok((count, rows, cols, pixels))
}

/// Load an IDX image file without labels (all labels zero, one class);
/// enough for inspecting individual images.
pub fn load_idx_images(images_path: &Path) -> Result<Dataset> {
    let (count, rows, cols, pixels) = parse_idx_images(images_path)?;
    Dataset::from_raw(rows, cols, 1, 1, pixels, vec![0; count])
}

/// Load an IDX image/label file pair (the MNIST container format).
/// Big-endian headers; byte counts are verified against the declared
/// dimensions before anything is copied.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (count, rows, cols, pixels) = parse_idx_images(images_path)?;

    let lab = read_file(labels_path)?;
    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Data(format!(
            "{}: expected label magic 0x{IDX_LABEL_MAGIC:08x} at offset 0, found 0x{magic:08x}",
            labels_path.display()
        )));
    }
    let label_count = be_u32(&lab, 4, labels_path)? as usize;
    if lab.len() != 8 + label_count {
        return Err(Error::Data(format!(
            "{}: header declares {label_count} labels but the file has {} payload bytes",
            labels_path.display(),
            lab.len().saturating_sub(8)
        )));
    }
    if label_count != count {
        return Err(Error::Data(format!(
            "{} has {count} images but {} has {label_count} labels",
            images_path.display(),
            labels_path.display()
        )));
    }

    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::from_raw(rows, cols, 1, class_count, pixels, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Load CIFAR binary batches from a directory. Records are 1 (CIFAR-10) or
/// 2 (CIFAR-100, coarse then fine) label bytes followed by 3072 pixel bytes
/// as R, G, B planes — which is already the channel-major layout used here.
/// CIFAR-100 keeps the fine label.
pub fn load_cifar(dir: &Path, variant: CifarVariant, split: Split) -> Result<Dataset> {
    let files: Vec<PathBuf> = match (variant, split) {
        (CifarVariant::Cifar10, Split::Train) => (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .collect(),
        (CifarVariant::Cifar10, Split::Test) => vec![dir.join("test_batch.bin")],
        (CifarVariant::Cifar100, Split::Train) => vec![dir.join("train.bin")],
        (CifarVariant::Cifar100, Split::Test) => vec![dir.join("test.bin")],
    };
    let (label_bytes, class_count) = match variant {
        CifarVariant::Cifar10 => (1, 10),
        CifarVariant::Cifar100 => (2, 100),
    };
    const PIXELS: usize = 32 * 32 * 3;
    let record = label_bytes + PIXELS;

    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for file in &files {
        let bytes = read_file(file)?;
        if bytes.is_empty() || bytes.len() % record != 0 {
            return Err(Error::Data(format!(
                "{}: {} bytes is not a whole number of {record}-byte records",
                file.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(record) {
            // CIFAR-100 records carry (coarse, fine); the fine label is last.
            labels.push(rec[label_bytes - 1] as usize);
            pixels.extend_from_slice(&rec[label_bytes..]);
        }
    }
    Dataset::from_raw(32, 32, 3, class_count, pixels, labels)
}

/// Ranges for the light augmentations; all zero means identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    /// Maximum absolute shift, pixels, each axis independently.
    pub max_shift: usize,
    /// Maximum absolute rotation, degrees.
    pub max_rotate_deg: f64,
    /// Probability of inverting intensities (x -> 1-x).
    pub invert_prob: f64,
}

impl Default for AugmentSpec {
    fn default() -> AugmentSpec {
        AugmentSpec {
            max_shift: 0,
            max_rotate_deg: 0.0,
            invert_prob: 0.0,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_shift > 2 {
            return Err(Error::Config(format!(
                "shift range is limited to 2 pixels, got {}",
                self.max_shift
            )));
        }
        if !(0.0..=15.0).contains(&self.max_rotate_deg) {
            return Err(Error::Config(format!(
                "rotation range is limited to 15 degrees, got {}",
                self.max_rotate_deg
            )));
        }
        if !(0.0..=1.0).contains(&self.invert_prob) {
            return Err(Error::Config(format!(
                "invert probability must be in [0, 1], got {}",
                self.invert_prob
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.max_shift == 0 && self.max_rotate_deg == 0.0 && self.invert_prob == 0.0
    }
}

/// Translate by (dx, dy): output (y, x) reads input (y-dy, x-dx), vacated
/// pixels are zero.
pub fn shift_image(image: &FeatureTensor, dx: i64, dy: i64) -> FeatureTensor {
    let (h, w, c) = image.shape();
    let mut out = FeatureTensor::zeros(h, w, c);
    let plane = h * w;
    for ch in 0..c {
        let src = image.channel_slice(ch);
        let dst = &mut out.data_mut()[ch * plane..(ch + 1) * plane];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (sy, sx) = (y - dy, x - dx);
                if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                    dst[(y * w as i64 + x) as usize] = src[(sy * w as i64 + sx) as usize];
                }
            }
        }
    }
    out
}

/// Rotate about the image center, nearest-neighbor sampling, zero fill.
pub fn rotate_image(image: &FeatureTensor, degrees: f64) -> FeatureTensor {
    let (h, w, c) = image.shape();
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = FeatureTensor::zeros(h, w, c);
    let plane = h * w;
    for ch in 0..c {
        let src = image.channel_slice(ch);
        let dst = &mut out.data_mut()[ch * plane..(ch + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                // Inverse-rotate the output coordinate into the source.
                let (ry, rx) = (y as f64 - cy, x as f64 - cx);
                let sy = (-sin * rx + cos * ry + cy).round();
                let sx = (cos * rx + sin * ry + cx).round();
                if sy >= 0.0 && sy < h as f64 && sx >= 0.0 && sx < w as f64 {
                    dst[y * w + x] = src[sy as usize * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Intensity inversion for normalized images.
pub fn invert_image(image: &FeatureTensor) -> FeatureTensor {
    let mut out = image.clone();
    for v in out.data_mut() {
        *v = 1.0 - *v;
    }
    out
}

/// Apply the requested augmentations with draws from `rng`, in the fixed
/// order shift, rotate, invert. The draw count depends only on `spec`, not on
/// the outcomes, so sample k of an epoch always consumes the same draws.
pub fn augment(image: &FeatureTensor, spec: &AugmentSpec, rng: &mut impl Rng) -> Result<FeatureTensor> {
    spec.validate()?;
    if spec.is_identity() {
        return Ok(image.clone());
    }
    let mut out = image.clone();
    if spec.max_shift > 0 {
        let m = spec.max_shift as i64;
        let dx = rng.random_range(-m..=m);
        let dy = rng.random_range(-m..=m);
        if (dx, dy) != (0, 0) {
            out = shift_image(&out, dx, dy);
        }
    }
    if spec.max_rotate_deg > 0.0 {
        let angle = rng.random_range(-spec.max_rotate_deg..spec.max_rotate_deg);
        out = rotate_image(&out, angle);
    }
    if spec.invert_prob > 0.0 && rng.random::<f64>() < spec.invert_prob {
        out = invert_image(&out);
    }
    Ok(out)
}

/// Deterministic batching recipe for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub epoch: usize,
}

/// The epoch's sample order: a keyed permutation of 0..count.
pub fn shuffled_indices(count: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(streams::shuffle(epoch));
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng);
    order
}

pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Vec<FeatureTensor>,
    pub labels: Vec<usize>,
}

pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a> Iterator for Batches<'a> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let images = indices
            .iter()
            .map(|&i| self.dataset.image(i).expect("index from a valid permutation"))
            .collect();
        let labels = indices.iter().map(|&i| self.dataset.label(i)).collect();
        Some(Batch {
            indices,
            images,
            labels,
        })
    }
}

/// Iterate one epoch in the plan's shuffled order; the final short batch is
/// included.
pub fn batches<'a>(dataset: &'a Dataset, plan: &BatchPlan) -> Result<Batches<'a>> {
    if plan.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if !dataset.is_normalized() {
        return Err(Error::State("normalize the dataset before batching".into()));
    }
    Ok(Batches {
        dataset,
        order: shuffled_indices(dataset.count(), plan.seed, plan.epoch),
        batch_size: plan.batch_size,
        pos: 0,
    })
}
