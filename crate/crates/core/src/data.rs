//! Datasets: CIFAR-10 binary ingestion, the `DPMIXDS1` container, synthetic
//! pools, normalization and a seeded toy-task generator.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "DPMIXDS1"
//! 8       4     version (u32, = 1)
//! 12      16    N, C, H, W (u32 each)
//! 28      1     dtype (0 = u8, 1 = f32 LE)
//! 29      4     num_classes (u32)
//! 33      4N    labels (u32 each)
//! 33+4N   ...   N*C*H*W pixels, row-major N x C x H x W
//! ```
//!
//! u8 pixels are exposed as `v / 255`.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augment::SyntheticPool;
use crate::error::{Error, Result};
use crate::nn::{InputShape, LabeledExample};
use crate::rng::{Purpose, SeedStreams};
use crate::tensor::Tensor;

pub const CONTAINER_MAGIC: &[u8; 8] = b"DPMIXDS1";
pub const CONTAINER_VERSION: u32 = 1;
const HEADER_LEN: usize = 33;

pub const CIFAR10_RECORD: usize = 3073;
const CIFAR10_CLASSES: usize = 10;
const CIFAR10_SIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelType {
    U8,
    F32,
}

impl PixelType {
    fn code(self) -> u8 {
        match self {
            PixelType::U8 => 0,
            PixelType::F32 => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(PixelType::U8),
            1 => Some(PixelType::F32),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            PixelType::U8 => 1,
            PixelType::F32 => 4,
        }
    }
}

/// Per-channel statistics applied as `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    shape: InputShape,
    labels: Vec<usize>,
    num_classes: usize,
    normalization: Option<Normalization>,
    pixel_type: PixelType,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        shape: InputShape,
        labels: Vec<usize>,
        num_classes: usize,
        pixel_type: PixelType,
    ) -> Result<Self> {
        if images.len() != labels.len() * shape.len() {
            return Err(Error::Length { expected: labels.len() * shape.len(), actual: images.len() });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelRange { label, num_classes });
        }
        if images.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow("dataset pixels"));
        }
        Ok(Dataset { images, shape, labels, num_classes, normalization: None, pixel_type })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> InputShape {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixel_type(&self) -> PixelType {
        self.pixel_type
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.shape.len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn features(&self, i: usize) -> Tensor {
        let data = self.image(i).iter().map(|&v| v as f64).collect();
        Tensor::new(self.shape.dims().to_vec(), data).expect("dataset pixels are finite")
    }

    /// Example `i` with a one-hot label.
    pub fn example(&self, i: usize) -> LabeledExample {
        let mut label = vec![0.0; self.num_classes];
        label[self.labels[i]] = 1.0;
        LabeledExample { features: self.features(i), label }
    }

    /// Per-channel mean and population standard deviation of the pixels.
    pub fn channel_stats(&self) -> Normalization {
        let (c, plane) = (self.shape.channels, self.shape.height * self.shape.width);
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for img in self.images.chunks_exact(self.shape.len()) {
            for ch in 0..c {
                for &v in &img[ch * plane..(ch + 1) * plane] {
                    mean[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let count = (self.len() * plane).max(1) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                (s / count - *m * *m).max(0.0).sqrt()
            })
            .collect();
        Normalization { mean, std }
    }

    /// Normalizes with this dataset's own channel statistics and returns them.
    pub fn normalize(&mut self) -> Result<Normalization> {
        let stats = self.channel_stats();
        self.normalize_with(&stats)?;
        Ok(stats)
    }

    /// Applies `(x - mean) / std` per channel. Channels with zero spread are
    /// only centred.
    pub fn normalize_with(&mut self, stats: &Normalization) -> Result<()> {
        if self.normalization.is_some() {
            return Err(Error::Config("dataset is already normalized".into()));
        }
        let c = self.shape.channels;
        if stats.mean.len() != c || stats.std.len() != c {
            return Err(Error::Length { expected: c, actual: stats.mean.len() });
        }
        let plane = self.shape.height * self.shape.width;
        let n = self.shape.len();
        for img in self.images.chunks_exact_mut(n) {
            for ch in 0..c {
                let s = if stats.std[ch] > 0.0 { stats.std[ch] } else { 1.0 };
                for v in &mut img[ch * plane..(ch + 1) * plane] {
                    *v = ((*v as f64 - stats.mean[ch]) / s) as f32;
                }
            }
        }
        self.normalization = Some(stats.clone());
        self.pixel_type = PixelType::F32;
        Ok(())
    }

    /// The dataset as a synthetic pool with one-hot labels.
    pub fn into_pool(self, provenance: impl Into<String>) -> Result<SyntheticPool> {
        let samples = (0..self.len()).map(|i| self.example(i)).collect();
        SyntheticPool::new(samples, self.num_classes, provenance)
    }
}

pub fn one_hot(label: usize, num_classes: usize) -> Result<Vec<f64>> {
    if label >= num_classes {
        return Err(Error::LabelRange { label, num_classes });
    }
    let mut v = vec![0.0; num_classes];
    v[label] = 1.0;
    Ok(v)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads CIFAR-10 binary batch files in order. Each 3073-byte record is a
/// label byte followed by the red, green and blue 32x32 planes.
pub fn load_cifar10_binary<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = read(path)?;
        if bytes.len() % CIFAR10_RECORD != 0 {
            return Err(Error::format(
                path,
                format!("length {} is not a multiple of {CIFAR10_RECORD}", bytes.len()),
            ));
        }
        for (r, record) in bytes.chunks_exact(CIFAR10_RECORD).enumerate() {
            let label = record[0] as usize;
            if label >= CIFAR10_CLASSES {
                return Err(Error::format(path, format!("record {r} has corrupt label {label}")));
            }
            labels.push(label);
            images.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    Dataset::new(
        images,
        InputShape::new(3, CIFAR10_SIDE, CIFAR10_SIDE),
        labels,
        CIFAR10_CLASSES,
        PixelType::U8,
    )
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4-byte slice"))
}

fn to_u32(v: usize, what: &str, path: &Path) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::format(path, format!("{what} = {v} does not fit in u32")))
}

pub fn encode_container(dataset: &Dataset, path: &Path) -> Result<Vec<u8>> {
    let s = dataset.shape;
    let n = dataset.len();
    let width = dataset.pixel_type.width();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n + dataset.images.len() * width);
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    for (v, what) in [(n, "N"), (s.channels, "C"), (s.height, "H"), (s.width, "W")] {
        out.extend_from_slice(&to_u32(v, what, path)?.to_le_bytes());
    }
    out.push(dataset.pixel_type.code());
    out.extend_from_slice(&to_u32(dataset.num_classes, "num_classes", path)?.to_le_bytes());
    for &l in &dataset.labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    match dataset.pixel_type {
        PixelType::U8 => out.extend(dataset.images.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)),
        PixelType::F32 => {
            for v in &dataset.images {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_container(bytes: &[u8], path: &Path) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if &bytes[..8] != CONTAINER_MAGIC {
        return Err(Error::format(path, "magic mismatch, expected DPMIXDS1"));
    }
    let version = u32_at(bytes, 8);
    if version != CONTAINER_VERSION {
        return Err(Error::format(path, format!("unsupported container version {version}")));
    }
    let [n, c, h, w] = [12, 16, 20, 24].map(|o| u32_at(bytes, o) as usize);
    let pixel_type = PixelType::from_code(bytes[28])
        .ok_or_else(|| Error::format(path, format!("unknown dtype code {}", bytes[28])))?;
    let num_classes = u32_at(bytes, 29) as usize;
    let pixels = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::format(path, "declared sizes overflow"))?;
    let expected = HEADER_LEN as u128 + 4 * n as u128 + (pixels as u128) * pixel_type.width() as u128;
    if bytes.len() as u128 != expected {
        return Err(Error::format(
            path,
            format!("size mismatch: header declares {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let labels_end = HEADER_LEN + 4 * n;
    let labels: Vec<usize> = bytes[HEADER_LEN..labels_end].chunks_exact(4).map(|b| u32_at(b, 0) as usize).collect();
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
        return Err(Error::format(path, format!("label {l} of record {i} out of range for {num_classes} classes")));
    }
    let body = &bytes[labels_end..];
    let images: Vec<f32> = match pixel_type {
        PixelType::U8 => body.iter().map(|&b| b as f32 / 255.0).collect(),
        PixelType::F32 => body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect(),
    };
    Dataset::new(images, InputShape::new(c, h, w), labels, num_classes, pixel_type)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_container(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_container(dataset, path)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_container(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    decode_container(&read(path)?, path)
}

/// Loads a pool container whose labels must lie below `num_classes`.
/// Classes without samples are listed in `missing_classes`.
pub fn load_synthetic_pool(path: impl AsRef<Path>, num_classes: usize) -> Result<SyntheticPool> {
    let path = path.as_ref();
    let dataset = load_container(path)?;
    pool_from_dataset(dataset, num_classes, path)
}

pub(crate) fn pool_from_dataset(mut dataset: Dataset, num_classes: usize, path: &Path) -> Result<SyntheticPool> {
    if let Some(&l) = dataset.labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::format(path, format!("pool label {l} out of range for {num_classes} classes")));
    }
    dataset.num_classes = num_classes;
    dataset.into_pool(format!("container {}", path.display()))
}

/// Which sample stream of a toy task to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToySplit {
    Train,
    Test,
    /// Drawn from perturbed class templates, emulating a synthetic-data
    /// domain gap.
    Pool,
}

/// Parameters of the toy image-classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Template amplitude in units of the pixel noise standard deviation.
    pub separation: f64,
    pub noise_std: f64,
    /// Maximum random translation (pixels) applied to each template draw.
    pub max_shift: usize,
    /// Relative size of the template perturbation used for the pool split.
    pub pool_gap: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            classes: 10,
            per_class: 200,
            channels: 3,
            height: 8,
            width: 8,
            separation: 1.0,
            noise_std: 1.0,
            max_shift: 1,
            pool_gap: 0.5,
            seed: 0,
        }
    }
}

/// Class-conditioned images: a smooth, left-right symmetric template per
/// class (unit RMS, scaled by `separation · noise_std`), randomly shifted by
/// up to `max_shift` pixels, plus i.i.d. Gaussian pixel noise. Templates
/// depend only on `spec.seed`, so all splits share them.
pub fn make_toy_dataset(spec: &ToySpec, split: ToySplit) -> Result<Dataset> {
    if spec.classes == 0 || spec.channels == 0 || spec.height == 0 || spec.width == 0 {
        return Err(Error::Config("toy classes and image dimensions must be positive".into()));
    }
    if spec.per_class == 0 {
        return Err(Error::Config("toy per_class count must be positive (empty classes)".into()));
    }
    if !(spec.separation > 0.0) || !(spec.noise_std >= 0.0) {
        return Err(Error::Config("toy separation must be positive and noise_std non-negative".into()));
    }
    let shape = InputShape::new(spec.channels, spec.height, spec.width);
    let streams = SeedStreams::new(spec.seed);
    let mut templates: Vec<Vec<f64>> = (0..spec.classes)
        .map(|c| smooth_symmetric_field(shape, &mut streams.rng(Purpose::Data, 0, c as u64)))
        .collect();
    if split == ToySplit::Pool {
        for (c, t) in templates.iter_mut().enumerate() {
            let gap = smooth_symmetric_field(shape, &mut streams.rng(Purpose::Data, 1, c as u64));
            for (v, g) in t.iter_mut().zip(gap) {
                *v += spec.pool_gap * g;
            }
            rescale_rms(t);
        }
    }
    let split_id = match split {
        ToySplit::Train => 10,
        ToySplit::Test => 11,
        ToySplit::Pool => 12,
    };
    let mut rng = streams.rng(Purpose::Data, split_id, 0);
    let n = spec.classes * spec.per_class;
    let amp = spec.separation * spec.noise_std;
    let mut images = Vec::with_capacity(n * shape.len());
    let mut labels = Vec::with_capacity(n);
    let shift = spec.max_shift as i64;
    for i in 0..n {
        let class = i % spec.classes;
        let (dy, dx) = (rng.random_range(-shift..=shift), rng.random_range(-shift..=shift));
        let t = &templates[class];
        for ch in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    let sy = clamp_index(y as i64 + dy, shape.height);
                    let sx = clamp_index(x as i64 + dx, shape.width);
                    let base = t[(ch * shape.height + sy) * shape.width + sx];
                    let noise: f64 = rng.sample(StandardNormal);
                    images.push((amp * base + spec.noise_std * noise) as f32);
                }
            }
        }
        labels.push(class);
    }
    Dataset::new(images, shape, labels, spec.classes, PixelType::F32)
}

fn clamp_index(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

fn smooth_symmetric_field<R: Rng>(shape: InputShape, rng: &mut R) -> Vec<f64> {
    let (h, w) = (shape.height, shape.width);
    let raw: Vec<f64> = (0..shape.len()).map(|_| rng.sample(StandardNormal)).collect();
    let mut out = vec![0.0; raw.len()];
    for ch in 0..shape.channels {
        let plane = &raw[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                // 3x3 box blur of the left-right symmetrized field
                let mut s = 0.0;
                let mut count = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                            continue;
                        }
                        let (yy, xx) = (yy as usize, xx as usize);
                        s += plane[yy * w + xx] + plane[yy * w + (w - 1 - xx)];
                        count += 2.0;
                    }
                }
                out[(ch * h + y) * w + x] = s / count;
            }
        }
    }
    rescale_rms(&mut out);
    out
}

fn rescale_rms(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    if rms > 0.0 {
        v.iter_mut().for_each(|x| *x /= rms);
    }
}
