//! MNIST-style IDX files: big-endian headers, unsigned bytes scaled by 1/255.

use std::fs;
use std::path::Path;

use crate::data::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

/// `(count, rows, cols, pixels)` from an IDX image file.
pub fn parse_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(path, format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let body = &bytes[16..];
    let want = n * rows * cols;
    if body.len() != want {
        return Err(Error::format(path, format!("expected {want} pixel bytes, found {}", body.len())));
    }
    Ok((n, rows, cols, body.iter().map(|&b| b as f32 / 255.0).collect()))
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(path, format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::format(path, format!("expected {n} labels, found {}", body.len())));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads `{train,t10k}-{images-idx3,labels-idx1}-ubyte` from `dir`.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let image_path = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let label_path = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let (n, rows, cols, pixels) = parse_images(&read(&image_path)?, &image_path)?;
    let labels = parse_labels(&read(&label_path)?, &label_path)?;
    if labels.len() != n {
        return Err(Error::format(
            &label_path,
            format!("{} labels for {n} images", labels.len()),
        ));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::format(&label_path, format!("label {l} out of range")));
    }
    Dataset::new(Tensor::new(&[n, 1, rows, cols], pixels)?, labels, None, 10, split)
}
