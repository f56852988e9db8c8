//! Labelled image datasets: synthetic templates, CIFAR-10 binary and CSV
//! ingestion, and training-time augmentation.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::Phase;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_CLASSES: usize = 10;
pub const AUGMENT_PAD: usize = 4;

/// Images stored NCHW in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub resolution: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<usize>, channels: usize, resolution: usize, num_classes: usize) -> Result<Self> {
        let per = channels * resolution * resolution;
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::shape(format!(
                "{} values do not form {} images of {channels}x{resolution}x{resolution}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Self { images, labels, channels, resolution, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.resolution * self.resolution
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Stacks the selected examples into an `[n, C, H, W]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("example {i} out of range ({} examples)", self.len())));
            }
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![indices.len(), self.channels, self.resolution, self.resolution], data)
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &i in indices {
            h[self.labels[i]] += 1;
        }
        h
    }

    /// Example indices grouped by class, each group ascending.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups
    }
}

/// One random template per class plus i.i.d. Gaussian pixel noise.
///
/// Templates come from `seed` alone, so train and test sets drawn with
/// different `split` tags share them.
pub fn generate_synthetic_split(
    classes: usize,
    per_class: usize,
    resolution: usize,
    noise: f64,
    seed: u64,
    split: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::invalid("synthetic data needs at least 2 classes"));
    }
    if resolution == 0 || !(noise >= 0.0) {
        return Err(Error::invalid("synthetic data needs a positive resolution and noise >= 0"));
    }
    let per = 3 * resolution * resolution;
    let mut trng = stream(seed, Stream::Synthetic, &[0]);
    let templates: Vec<f32> = (0..classes * per).map(|_| StandardNormal.sample(&mut trng)).collect();
    let mut nrng = stream(seed, Stream::Synthetic, &[1 + split]);
    let mut images = Vec::with_capacity(classes * per_class * per);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let t = &templates[c * per..(c + 1) * per];
        for _ in 0..per_class {
            images.extend(t.iter().map(|&v| {
                let z: f64 = StandardNormal.sample(&mut nrng);
                v + (noise * z) as f32
            }));
            labels.push(c);
        }
    }
    Dataset::new(images, labels, 3, resolution, classes)
}

pub fn generate_synthetic(classes: usize, per_class: usize, resolution: usize, noise: f64, seed: u64) -> Result<Dataset> {
    generate_synthetic_split(classes, per_class, resolution, noise, seed, 0)
}

/// Per-channel constants applied after scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Standardization {
    /// The customary CIFAR-10 training-set statistics.
    fn default() -> Self {
        Self { mean: [0.4914, 0.4822, 0.4465], std: [0.2470, 0.2435, 0.2616] }
    }
}

/// Parses the CIFAR-10 binary layout: per record one label byte followed by
/// 1024 red, 1024 green and 1024 blue bytes, each plane row-major 32×32.
pub fn parse_cifar10_binary(bytes: &[u8], norm: &Standardization) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::invalid(format!(
            "CIFAR-10 binary size {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let plane = 32 * 32;
    let mut images = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::invalid(format!("record {i}: label {label} > 9")));
        }
        labels.push(label);
        for (c, px) in rec[1..].chunks_exact(plane).enumerate() {
            images.extend(px.iter().map(|&b| (b as f32 / 255.0 - norm.mean[c]) / norm.std[c]));
        }
    }
    Dataset::new(images, labels, 3, 32, CIFAR_CLASSES)
}

pub fn load_cifar10_binary(path: &Path, norm: &Standardization) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    parse_cifar10_binary(&bytes, norm).map_err(|e| Error::Format { path: path.to_owned(), reason: e.to_string() })
}

/// Writes raw records; `pixels` holds 3072 bytes per label.
pub fn write_cifar10_binary(path: &Path, labels: &[u8], pixels: &[u8]) -> Result<()> {
    if pixels.len() != labels.len() * (CIFAR_RECORD - 1) {
        return Err(Error::shape("pixel buffer does not match the label count"));
    }
    let mut f = fs::File::create(path)?;
    for (l, px) in labels.iter().zip(pixels.chunks_exact(CIFAR_RECORD - 1)) {
        f.write_all(&[*l])?;
        f.write_all(px)?;
    }
    Ok(())
}

/// Reads `label,v0,v1,...` rows (no header) holding already-normalized
/// NCHW pixel values.
pub fn load_csv(path: &Path, channels: usize, resolution: usize, num_classes: usize) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let per = channels * resolution * resolution;
    let fail = |line: usize, reason: String| Error::Format { path: path.to_owned(), reason: format!("line {line}: {reason}") };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (ln, row) in text.lines().enumerate().filter(|(_, r)| !r.trim().is_empty()) {
        let mut fields = row.split(',').map(str::trim);
        let label: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| fail(ln + 1, "missing or non-integer label".into()))?;
        if label >= num_classes {
            return Err(fail(ln + 1, format!("label {label} outside {num_classes} classes")));
        }
        let start = images.len();
        for f in fields {
            images.push(f.parse::<f32>().map_err(|e| fail(ln + 1, format!("{f:?}: {e}")))?);
        }
        if images.len() - start != per {
            return Err(fail(ln + 1, format!("expected {per} values, found {}", images.len() - start)));
        }
        labels.push(label);
    }
    Dataset::new(images, labels, channels, resolution, num_classes)
}

/// Zero-pads one CHW image by `pad`, takes the `res×res` window at
/// `(dy, dx)` of the padded image and optionally mirrors it horizontally.
pub fn crop_flip(image: &[f32], channels: usize, res: usize, dy: usize, dx: usize, flip: bool, out: &mut [f32]) {
    let pad = AUGMENT_PAD;
    for c in 0..channels {
        let src = &image[c * res * res..(c + 1) * res * res];
        let dst = &mut out[c * res * res..(c + 1) * res * res];
        for y in 0..res {
            let sy = (y + dy) as isize - pad as isize;
            for x in 0..res {
                let xx = if flip { res - 1 - x } else { x };
                let sx = (xx + dx) as isize - pad as isize;
                dst[y * res + x] = if sy >= 0 && sx >= 0 && (sy as usize) < res && (sx as usize) < res {
                    src[sy as usize * res + sx as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

/// Random pad-4 crop plus 50% horizontal flip per sample; identity at eval.
pub fn augment<R: Rng + ?Sized>(batch: &Tensor, phase: Phase, rng: &mut R) -> Result<Tensor> {
    if phase == Phase::Eval {
        return Ok(batch.clone());
    }
    let [n, c, h, w] = batch.dims4("augment input")?;
    if h != w {
        return Err(Error::shape("augment expects square images"));
    }
    let per = c * h * w;
    let mut out = Tensor::zeros(batch.shape());
    for i in 0..n {
        let dy = rng.random_range(0..=2 * AUGMENT_PAD);
        let dx = rng.random_range(0..=2 * AUGMENT_PAD);
        let flip = rng.random_bool(0.5);
        crop_flip(&batch.data()[i * per..(i + 1) * per], c, h, dy, dx, flip, &mut out.data_mut()[i * per..(i + 1) * per]);
    }
    Ok(out)
}
