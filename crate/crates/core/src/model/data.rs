//! Dataset containers, IDX / CIFAR-10 binary readers and a synthetic generator.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{format_err, shape_err, Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_BYTES: usize = 3073;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images in `[0, 1]` (`N x C x H x W`) with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

/// Where to read a dataset from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource<'a> {
    Idx { images: &'a Path, labels: &'a Path },
    Cifar10 { batch: &'a Path },
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return shape_err(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Contract(format!("label {bad} outside {classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.gather_outer(indices)?;
        Ok((images, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// First `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images.slice_outer(0, n).expect("non-empty prefix"),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            split: self.split,
        }
    }

    /// Concatenates datasets with equal image shapes and class counts.
    pub fn concat(parts: &[Dataset]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::Config("nothing to concatenate".into()));
        };
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.image_shape() != first.image_shape() || p.classes != first.classes {
                return shape_err("concatenated datasets must share image shape and classes");
            }
            data.extend_from_slice(p.images.data());
            labels.extend_from_slice(&p.labels);
        }
        let mut shape = first.images.shape().to_vec();
        shape[0] = labels.len();
        Dataset::new(Tensor::new(shape, data)?, labels, first.classes, first.split)
    }

    /// Splits off the trailing `n_test` samples as a test split.
    pub fn split_test(self, n_test: usize) -> Result<(Self, Self)> {
        let n = self.len();
        if n_test == 0 || n_test >= n {
            return shape_err(format!("cannot hold out {n_test} of {n} samples"));
        }
        let cut = n - n_test;
        let train = Self {
            images: self.images.slice_outer(0, cut)?,
            labels: self.labels[..cut].to_vec(),
            classes: self.classes,
            split: Split::Train,
        };
        let test = Self {
            images: self.images.slice_outer(cut, n)?,
            labels: self.labels[cut..].to_vec(),
            classes: self.classes,
            split: Split::Test,
        };
        Ok((train, test))
    }

    /// Same samples in a different order.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let (images, labels) = self.batch(order)?;
        Self::new(images, labels, self.classes, self.split)
    }
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes(b.try_into().expect("4 bytes"))),
        None => format_err(offset as u64, "truncated header"),
    }
}

/// Parses an IDX image file (`0x00000803`, dims N, H, W, then bytes).
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return format_err(
            0,
            format!("bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x} (IDX images)"),
        );
    }
    let n = read_u32_be(bytes, 4)? as usize;
    let h = read_u32_be(bytes, 8)? as usize;
    let w = read_u32_be(bytes, 12)? as usize;
    if n == 0 || h == 0 || w == 0 {
        return format_err(4, "zero dimension in IDX header");
    }
    let need = 16 + n * h * w;
    if bytes.len() < need {
        return format_err(bytes.len() as u64, format!("truncated: {need} bytes expected"));
    }
    let data = bytes[16..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![n, 1, h, w], data)
}

/// Parses an IDX label file (`0x00000801`, N, then bytes).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return format_err(
            0,
            format!("bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x} (IDX labels)"),
        );
    }
    let n = read_u32_be(bytes, 4)? as usize;
    let need = 8 + n;
    if bytes.len() < need {
        return format_err(bytes.len() as u64, format!("truncated: {need} bytes expected"));
    }
    Ok(bytes[8..need].iter().map(|&b| b as usize).collect())
}

/// Parses a CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes.
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Tensor, Vec<usize>)> {
    if bytes.is_empty() {
        return format_err(0, "empty CIFAR-10 batch");
    }
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        let whole = bytes.len() / CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES;
        return format_err(
            whole as u64,
            format!("truncated record: {} trailing bytes", bytes.len() - whole),
        );
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3072);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        if rec[0] > 9 {
            return format_err((i * CIFAR_RECORD_BYTES) as u64, format!("label {} > 9", rec[0]));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok((Tensor::new(vec![n, 3, 32, 32], data)?, labels))
}

pub fn load_dataset(source: DatasetSource<'_>, classes: usize, split: Split) -> Result<Dataset> {
    let (images, labels) = match source {
        DatasetSource::Idx { images, labels } => {
            let images = parse_idx_images(&fs::read(images)?)?;
            let labels = parse_idx_labels(&fs::read(labels)?)?;
            if labels.len() != images.shape()[0] {
                return format_err(
                    4,
                    format!("{} labels for {} images", labels.len(), images.shape()[0]),
                );
            }
            (images, labels)
        }
        DatasetSource::Cifar10 { batch } => parse_cifar10(&fs::read(batch)?)?,
    };
    Dataset::new(images, labels, classes, split)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes single-channel images as an IDX image file.
pub fn encode_idx_images(images: &Tensor) -> Result<Vec<u8>> {
    let [n, 1, h, w] = *images.shape() else {
        return shape_err(format!("IDX images must be N x 1 x H x W, got {:?}", images.shape()));
    };
    let mut out = Vec::with_capacity(16 + images.numel());
    for v in [IDX_IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

/// Parameters of the synthetic class-blob generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub shape: [usize; 3],
    /// Gaussian bumps making up each class prototype.
    pub bumps: usize,
    /// Per-pixel Gaussian noise standard deviation.
    pub noise: f64,
    /// Maximum integer translation of the prototype per sample.
    pub jitter: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            shape: [1, 12, 12],
            bumps: 2,
            noise: 0.1,
            jitter: 0,
        }
    }
}

/// Class-blob images with the default [`SynthSpec`].
pub fn synth_dataset(seed: u64, n: usize, classes: usize) -> Result<Dataset> {
    synth_dataset_with(seed, n, classes, &SynthSpec::default())
}

/// Each class has a prototype made of Gaussian bumps; a sample is its class
/// prototype (optionally translated) plus i.i.d. Gaussian pixel noise,
/// clamped to `[0, 1]`. Labels are drawn uniformly at random.
pub fn synth_dataset_with(seed: u64, n: usize, classes: usize, spec: &SynthSpec) -> Result<Dataset> {
    if classes < 2 || n < classes {
        return Err(Error::Config(format!("synth dataset needs n >= classes >= 2, got n={n}, classes={classes}")));
    }
    let [c, h, w] = spec.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes: Vec<Vec<f64>> = (0..classes).map(|_| prototype(&mut rng, spec)).collect();
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let plane = c * h * w;
    let mut data = Vec::with_capacity(n * plane);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.gen_range(0..classes);
        let j = spec.jitter as isize;
        let (dy, dx) = if j > 0 {
            (rng.gen_range(-j..=j), rng.gen_range(-j..=j))
        } else {
            (0, 0)
        };
        let proto = &prototypes[label];
        for ch in 0..c {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let (sy, sx) = (y - dy, x - dx);
                    let base = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        proto[ch * h * w + sy as usize * w + sx as usize]
                    } else {
                        0.0
                    };
                    data.push((base + noise.sample(&mut rng)).clamp(0.0, 1.0));
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, classes, Split::Train)
}

fn prototype(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Vec<f64> {
    let [c, h, w] = spec.shape;
    let mut img = vec![0.0; c * h * w];
    for ch in 0..c {
        for _ in 0..spec.bumps.max(1) {
            let cy = rng.gen_range(0.0..h as f64);
            let cx = rng.gen_range(0.0..w as f64);
            let sigma = rng.gen_range(0.08..0.2) * h.min(w) as f64;
            let amp = rng.gen_range(0.6..1.0);
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    img[ch * h * w + y * w + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    img.iter_mut().for_each(|v| *v = v.min(1.0));
    img
}

/// Random permutation of `0..n` from a seeded stream.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
