//! Dataset ingestion: FashionMNIST (IDX), CIFAR-10/100 (binary batches), and
//! seeded Gaussian blobs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::ImageDims;
use crate::error::{Error, Result};
use crate::rng::{Purpose, RngStream};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;
const IDX_CLASSES: usize = 10;
const CIFAR_PIXELS: usize = 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel affine normalization applied to pixels already scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Population mean and standard deviation per channel of `[0, 1]` pixels.
    pub fn fit(pixels: &[f64], dims: ImageDims) -> Self {
        let plane = dims.area();
        let n = pixels.len() / dims.len().max(1);
        let count = (n * plane) as f64;
        let mut mean = vec![0.0; dims.channels];
        let mut std = vec![0.0; dims.channels];
        for (c, (m, s)) in mean.iter_mut().zip(std.iter_mut()).enumerate() {
            let channel = || {
                (0..n).flat_map(move |i| {
                    let start = i * dims.len() + c * plane;
                    pixels[start..start + plane].iter().copied()
                })
            };
            *m = channel().sum::<f64>() / count;
            let var = channel().map(|v| (v - *m) * (v - *m)).sum::<f64>() / count;
            *s = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Normalization { mean, std }
    }

    fn apply(&self, pixels: &mut [f64], dims: ImageDims) {
        for image in pixels.chunks_mut(dims.len()) {
            for (c, plane) in image.chunks_mut(dims.area()).enumerate() {
                plane
                    .iter_mut()
                    .for_each(|v| *v = (*v - self.mean[c]) / self.std[c]);
            }
        }
    }

    /// Inverse of normalization, back to `[0, 1]` pixel space.
    pub fn denormalize(&self, image: &[f64], dims: ImageDims) -> Vec<f64> {
        let mut out = image.to_vec();
        for (c, plane) in out.chunks_mut(dims.area()).enumerate() {
            plane
                .iter_mut()
                .for_each(|v| *v = *v * self.std[c] + self.mean[c]);
        }
        out
    }
}

/// How to obtain normalization constants for a split.
#[derive(Clone, Debug)]
pub enum NormSource {
    /// Compute from the split being loaded (use for training splits).
    Fit,
    Given(Normalization),
}

#[derive(Clone, Debug)]
pub struct Dataset {
    images: Vec<f64>,
    dims: ImageDims,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
    norm: Normalization,
}

impl Dataset {
    /// Builds a dataset from `[0, 1]`-scaled pixels, applying normalization once.
    pub fn from_unit_pixels(
        mut pixels: Vec<f64>,
        dims: ImageDims,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
        norm: NormSource,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::config("dataset is empty"));
        }
        if pixels.len() != labels.len() * dims.len() {
            return Err(Error::config(format!(
                "{} pixels for {} images of {:?}",
                pixels.len(),
                labels.len(),
                dims.as_array()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::config(format!("label {bad} outside [0, {classes})")));
        }
        let norm = match norm {
            NormSource::Fit => Normalization::fit(&pixels, dims),
            NormSource::Given(n) => n,
        };
        if norm.mean.len() != dims.channels || norm.std.len() != dims.channels {
            return Err(Error::config("normalization channel count mismatch"));
        }
        norm.apply(&mut pixels, dims);
        Ok(Dataset {
            images: pixels,
            dims,
            labels,
            classes,
            split,
            norm,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Normalized pixels of image `i`, channel-planar.
    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.dims.len();
        &self.images[i * n..(i + 1) * n]
    }

    /// `(len(indices), C, H, W)` tensor of the given images.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.dims.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.dims.as_array();
        Tensor::new(vec![indices.len(), c, h, w], data).expect("consistent batch")
    }

    /// Keeps only the listed images, in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.dims.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            dims: self.dims,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
            norm: self.norm.clone(),
        }
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(at as u64, format!("truncated {what} header")))
}

/// Parses IDX image and label buffers (big-endian headers, magic 2051 / 2049).
pub fn parse_idx(
    image_bytes: &[u8],
    label_bytes: &[u8],
    split: Split,
    norm: NormSource,
) -> Result<Dataset> {
    let magic = be_u32(image_bytes, 0, "image")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            0,
            format!("image file magic {magic}, expected {IDX_IMAGES_MAGIC}"),
        ));
    }
    let n = be_u32(image_bytes, 4, "image")? as usize;
    let rows = be_u32(image_bytes, 8, "image")? as usize;
    let cols = be_u32(image_bytes, 12, "image")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::format(
            8,
            format!("degenerate image size {rows}x{cols}"),
        ));
    }
    let want = 16 + n * rows * cols;
    if image_bytes.len() != want {
        return Err(Error::format(
            image_bytes.len().min(want) as u64,
            format!(
                "image file holds {} bytes, header implies {want}",
                image_bytes.len()
            ),
        ));
    }

    let magic = be_u32(label_bytes, 0, "label")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            0,
            format!("label file magic {magic}, expected {IDX_LABELS_MAGIC}"),
        ));
    }
    let n_labels = be_u32(label_bytes, 4, "label")? as usize;
    if n_labels != n {
        return Err(Error::format(
            4,
            format!("label count {n_labels} differs from image count {n}"),
        ));
    }
    if label_bytes.len() != 8 + n {
        return Err(Error::format(
            label_bytes.len().min(8 + n) as u64,
            format!(
                "label file holds {} bytes, header implies {}",
                label_bytes.len(),
                8 + n
            ),
        ));
    }
    let labels: Vec<usize> = label_bytes[8..].iter().map(|&b| b as usize).collect();
    if let Some(pos) = labels.iter().position(|&l| l >= IDX_CLASSES) {
        return Err(Error::format(
            (8 + pos) as u64,
            format!("label {} outside [0, {IDX_CLASSES})", labels[pos]),
        ));
    }
    let pixels = image_bytes[16..]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Dataset::from_unit_pixels(
        pixels,
        ImageDims::new(1, rows, cols),
        labels,
        IDX_CLASSES,
        split,
        norm,
    )
}

pub fn load_idx(images: &Path, labels: &Path, split: Split, norm: NormSource) -> Result<Dataset> {
    parse_idx(
        &std::fs::read(images)?,
        &std::fs::read(labels)?,
        split,
        norm,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }
}

/// Parses concatenated CIFAR binary records. CIFAR-100 records carry a coarse
/// then a fine label byte; the fine label is used.
pub fn parse_cifar(
    chunks: &[&[u8]],
    variant: CifarVariant,
    split: Split,
    norm: NormSource,
) -> Result<Dataset> {
    let rec = variant.record_len();
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for bytes in chunks {
        if bytes.is_empty() || bytes.len() % rec != 0 {
            return Err(Error::format(
                (bytes.len() - bytes.len() % rec) as u64,
                format!(
                    "{} bytes is not a multiple of the {rec}-byte record",
                    bytes.len()
                ),
            ));
        }
        for (r, record) in bytes.chunks_exact(rec).enumerate() {
            let label = record[variant.label_bytes() - 1] as usize;
            if label >= variant.classes() {
                return Err(Error::format(
                    (r * rec) as u64,
                    format!("label {label} outside [0, {})", variant.classes()),
                ));
            }
            labels.push(label);
            pixels.extend(
                record[variant.label_bytes()..]
                    .iter()
                    .map(|&b| b as f64 / 255.0),
            );
        }
    }
    Dataset::from_unit_pixels(
        pixels,
        ImageDims::new(3, 32, 32),
        labels,
        variant.classes(),
        split,
        norm,
    )
}

pub fn load_cifar(
    files: &[&Path],
    variant: CifarVariant,
    split: Split,
    norm: NormSource,
) -> Result<Dataset> {
    let buffers = files
        .iter()
        .map(std::fs::read)
        .collect::<std::io::Result<Vec<_>>>()?;
    let refs: Vec<&[u8]> = buffers.iter().map(Vec::as_slice).collect();
    parse_cifar(&refs, variant, split, norm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub per_class: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    /// Distance of every class center from the origin.
    pub separation: f64,
    pub seed: u64,
}

/// Isotropic unit-variance Gaussian clusters whose centers sit at distance
/// `separation` from the origin along seeded random directions. Centers are a
/// function of the seed alone; samples also depend on the split.
pub fn synth_blobs(spec: &BlobSpec, split: Split) -> Result<Dataset> {
    if spec.classes < 2 || spec.per_class == 0 || spec.height == 0 || spec.width == 0 {
        return Err(Error::config(format!("invalid blob spec {spec:?}")));
    }
    let dims = ImageDims::new(1, spec.height, spec.width);
    let d = dims.len();
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|k| {
            let mut rng = RngStream::new(spec.seed, Purpose::Synth, 0, k as u64);
            let dir: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            dir.iter().map(|v| v / norm * spec.separation).collect()
        })
        .collect();
    let split_key = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    let n = spec.per_class * spec.classes;
    let mut pixels = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % spec.classes;
        let mut rng = RngStream::new(spec.seed, Purpose::Synth, split_key, i as u64);
        pixels.extend(centers[k].iter().map(|c| c + rng.normal()));
        labels.push(k);
    }
    Dataset::from_unit_pixels(
        pixels,
        dims,
        labels,
        spec.classes,
        split,
        NormSource::Given(Normalization::identity(1)),
    )
}
