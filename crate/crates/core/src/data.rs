//! In-memory labeled image sets, IDX decoding and synthetic data.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Affine input normalization `(pixel / 255 - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: f32,
    pub std: f32,
}

impl Normalization {
    /// MNIST training-set pixel statistics.
    pub const MNIST: Normalization = Normalization {
        mean: 0.1307,
        std: 0.3081,
    };
    /// Plain `[0, 1]` scaling.
    pub const UNIT: Normalization = Normalization { mean: 0.0, std: 1.0 };

    #[inline]
    pub fn apply(&self, pixel: u8) -> f32 {
        (pixel as f32 / 255.0 - self.mean) / self.std
    }
}

impl Default for Normalization {
    fn default() -> Self {
        Self::MNIST
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    /// `images` is `N x C x H x W`; every label must be below `class_count`.
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::ShapeMismatch(alloc::format!(
                "dataset images must be NCHW, got {:?}",
                images.shape()
            )));
        }
        let n = images.shape()[0];
        if n == 0 {
            return Err(Error::Empty("dataset"));
        }
        if labels.len() != n {
            return Err(Error::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: class_count,
            });
        }
        Ok(Self {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Per-sample `C x H x W` shape.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Samples `[start, end)` as an image tensor and label slice.
    pub fn batch(&self, start: usize, end: usize) -> Result<(Tensor, &[usize])> {
        let images = self.images.slice_outer(start, end)?;
        Ok((images, &self.labels[start..end]))
    }

    /// Samples at the given indices, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let [c, h, w] = self.sample_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::ShapeMismatch(alloc::format!("sample {i} of {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::from_parts(alloc::vec![indices.len(), c, h, w], data)?, labels))
    }

    /// The first `n` samples (all of them if `n >= len`).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        let (images, labels) = self.batch(0, n)?;
        Dataset::new(images, labels.to_vec(), self.class_count)
    }

    /// Consecutive batches of at most `batch_size` samples, in order.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = (Tensor, &[usize])> + '_ {
        let size = batch_size.max(1);
        (0..self.len()).step_by(size).map(move |start| {
            self.batch(start, (start + size).min(self.len()))
                .expect("batch bounds lie inside the dataset")
        })
    }
}

fn read_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated(what))
}

/// Decoded IDX image file: `count` images of `rows x cols` bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages<'a> {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: &'a [u8],
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages<'_>> {
    let magic = read_u32(bytes, 0, "image header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let count = read_u32(bytes, 4, "image header")? as usize;
    let rows = read_u32(bytes, 8, "image header")? as usize;
    let cols = read_u32(bytes, 12, "image header")? as usize;
    let len = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or(Error::Truncated("image data"))?;
    let pixels = bytes.get(16..16 + len).ok_or(Error::Truncated("image data"))?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32(bytes, 0, "label header")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let count = read_u32(bytes, 4, "label header")? as usize;
    bytes.get(8..8 + count).ok_or(Error::Truncated("label data"))
}

/// Builds a single-channel dataset from the contents of an IDX image file
/// and an IDX label file.
pub fn dataset_from_idx(
    image_bytes: &[u8],
    label_bytes: &[u8],
    norm: Normalization,
    class_count: usize,
) -> Result<Dataset> {
    let images = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if images.count != labels.len() {
        return Err(Error::CountMismatch {
            images: images.count,
            labels: labels.len(),
        });
    }
    let data = images.pixels.iter().map(|&p| norm.apply(p)).collect();
    let tensor = Tensor::from_parts(alloc::vec![images.count, 1, images.rows, images.cols], data)?;
    Dataset::new(tensor, labels.iter().map(|&l| l as usize).collect(), class_count)
}

/// Dimensionality of [`synthetic_blobs`] samples; each is a `DIM x 1 x 1` image.
pub const BLOB_DIM: usize = 16;

/// Gaussian blobs: class centers drawn at radius ~8 and unit-free noise of
/// standard deviation 0.5, so the classes are linearly separable with a wide
/// margin. Labels cycle through the classes before shuffling, giving an
/// almost exactly uniform histogram.
pub fn synthetic_blobs(seed: u64, n: usize, classes: usize) -> Result<Dataset> {
    if classes == 0 || n < classes {
        return Err(Error::InvalidConfig(alloc::format!(
            "synthetic_blobs needs n >= classes >= 1 (n = {n}, classes = {classes})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0f32, 1.0).unwrap();
    let centers: Vec<Vec<f32>> = (0..classes)
        .map(|_| {
            let v: Vec<f32> = (0..BLOB_DIM).map(|_| unit.sample(&mut rng)).collect();
            let norm = libm::sqrtf(v.iter().map(|x| x * x).sum::<f32>()).max(1e-3);
            v.into_iter().map(|x| 8.0 * x / norm).collect()
        })
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * BLOB_DIM);
    for &l in &labels {
        for &c in &centers[l] {
            data.push(c + 0.5 * unit.sample(&mut rng));
        }
    }
    let images = Tensor::from_parts(alloc::vec![n, BLOB_DIM, 1, 1], data)?;
    Dataset::new(images, labels, classes)
}
