//! CIFAR-10 binary batches: records of one label byte and 3072 pixel bytes
//! (red, green and blue planes of 32×32).

use std::fs;
use std::path::Path;

use crate::data::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RECORD_LEN: usize = 3073;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// Appends the records of one batch file to `pixels` and `labels`.
pub fn parse_batch(bytes: &[u8], path: &Path, pixels: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<()> {
    if bytes.len() % RECORD_LEN != 0 {
        return Err(Error::format(
            path,
            format!("{} bytes is not a whole number of {RECORD_LEN}-byte records", bytes.len()),
        ));
    }
    for rec in bytes.chunks_exact(RECORD_LEN) {
        if rec[0] > 9 {
            return Err(Error::format(path, format!("label {} out of range", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(())
}

pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let files: &[&str] = match split {
        Split::Train => &TRAIN_FILES,
        Split::Test => &[TEST_FILE],
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        parse_batch(&bytes, &path, &mut pixels, &mut labels)?;
    }
    let n = labels.len();
    Dataset::new(Tensor::new(&[n, 3, 32, 32], pixels)?, labels, None, 10, split)
}
