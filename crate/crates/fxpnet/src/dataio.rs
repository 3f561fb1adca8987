//! Loading labeled image sets from IDX files on disk.

use std::path::{Path, PathBuf};

use fxpnet_core::data::{dataset_from_idx, Dataset, Normalization};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

/// Image and label file of one MNIST split inside `dir`, using the
/// distribution's file names (`train-images-idx3-ubyte`, ...).
pub fn mnist_files(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let p = split.prefix();
    (
        dir.join(format!("{p}-images-idx3-ubyte")),
        dir.join(format!("{p}-labels-idx1-ubyte")),
    )
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads an IDX image file and its label file into a normalized dataset.
pub fn load_idx(images: &Path, labels: &Path, norm: Normalization, class_count: usize) -> Result<Dataset> {
    let img = read_file(images)?;
    let lbl = read_file(labels)?;
    Ok(dataset_from_idx(&img, &lbl, norm, class_count)?)
}

pub fn load_mnist(dir: &Path, split: Split, norm: Normalization) -> Result<Dataset> {
    let (images, labels) = mnist_files(dir, split);
    load_idx(&images, &labels, norm, 10)
}

/// Writes raw pixels and labels as a pair of IDX files.
pub fn write_idx(images: &Path, labels: &Path, pixels: &[u8], rows: usize, cols: usize, label_bytes: &[u8]) -> Result<()> {
    let count = label_bytes.len();
    assert_eq!(pixels.len(), count * rows * cols, "pixel count does not match labels");
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [fxpnet_core::data::IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lbl = Vec::with_capacity(8 + count);
    for v in [fxpnet_core::data::IDX_LABELS_MAGIC, count as u32] {
        lbl.extend_from_slice(&v.to_be_bytes());
    }
    lbl.extend_from_slice(label_bytes);
    std::fs::write(images, img).map_err(|e| Error::io(images, e))?;
    std::fs::write(labels, lbl).map_err(|e| Error::io(labels, e))
}
