//! Directory format for generated datasets: `images.bin` (little-endian f32,
//! train samples first), `labels.bin` (one byte each), `boxes.csv` and
//! `meta.kv`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::BBox;
use crate::tensor::Tensor;

pub const BOXES_HEADER: &str = "index,x_min,y_min,x_max,y_max";

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_kv(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut s = String::new();
    for (k, v) in pairs {
        writeln!(s, "{k}={v}").unwrap();
    }
    write(path, s.as_bytes())
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("line {}: expected key=value", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn read_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "not UTF-8"))?;
    parse_kv(&text, path)
}

/// Writes both splits into `dir`. `extra` is appended to `meta.kv`.
pub fn write_dataset_dir(dir: &Path, train: &Dataset, test: &Dataset, extra: &[(String, String)]) -> Result<()> {
    if train.image_shape() != test.image_shape() || train.class_count != test.class_count {
        return Err(Error::Config("train and test splits disagree on image shape or classes".into()));
    }
    if train.class_count > 256 {
        return Err(Error::Config("labels.bin stores one byte per label".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut images = Vec::with_capacity(4 * (train.images.numel() + test.images.numel()));
    let mut labels = Vec::with_capacity(train.len() + test.len());
    let mut boxes = format!("{BOXES_HEADER}\n");
    let mut index = 0;
    for ds in [train, test] {
        for v in ds.images.data() {
            images.extend_from_slice(&v.to_le_bytes());
        }
        labels.extend(ds.labels.iter().map(|&l| l as u8));
        for i in 0..ds.len() {
            if let Some(bs) = &ds.boxes {
                for b in &bs[i] {
                    writeln!(boxes, "{index},{},{},{},{}", b.x_min, b.y_min, b.x_max, b.y_max).unwrap();
                }
            }
            index += 1;
        }
    }
    write(&dir.join("images.bin"), &images)?;
    write(&dir.join("labels.bin"), &labels)?;
    write(&dir.join("boxes.csv"), boxes.as_bytes())?;
    let [c, h, w] = train.image_shape();
    let mut meta: Vec<(String, String)> = [
        ("n_train", train.len()),
        ("n_test", test.len()),
        ("channels", c),
        ("height", h),
        ("width", w),
        ("classes", train.class_count),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    meta.extend(extra.iter().filter(|(k, _)| !meta.iter().any(|(m, _)| m == k)).cloned().collect::<Vec<_>>());
    write_kv(&dir.join("meta.kv"), &meta)
}

/// Reads a directory written by [`write_dataset_dir`].
pub fn read_dataset_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let meta_path = dir.join("meta.kv");
    let meta = read_kv(&meta_path)?;
    let get = |k: &str| -> Result<usize> {
        meta.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(&meta_path, format!("missing or invalid `{k}`")))
    };
    let (n_train, n_test) = (get("n_train")?, get("n_test")?);
    let (c, h, w, classes) = (get("channels")?, get("height")?, get("width")?, get("classes")?);
    let n = n_train + n_test;
    let per = c * h * w;

    let images_path = dir.join("images.bin");
    let bytes = read(&images_path)?;
    if bytes.len() != 4 * n * per {
        return Err(Error::format(&images_path, format!("expected {} bytes, found {}", 4 * n * per, bytes.len())));
    }
    let pixels: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let labels_path = dir.join("labels.bin");
    let labels: Vec<usize> = read(&labels_path)?.into_iter().map(usize::from).collect();
    if labels.len() != n {
        return Err(Error::format(&labels_path, format!("expected {n} labels, found {}", labels.len())));
    }

    let boxes_path = dir.join("boxes.csv");
    let text = String::from_utf8(read(&boxes_path)?).map_err(|_| Error::format(&boxes_path, "not UTF-8"))?;
    let mut lines = text.lines();
    if lines.next() != Some(BOXES_HEADER) {
        return Err(Error::format(&boxes_path, "missing header"));
    }
    let mut boxes: Vec<Vec<BBox>> = vec![Vec::new(); n];
    for (ln, line) in lines.enumerate() {
        let f: Vec<usize> = line
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(&boxes_path, format!("row {}: not integers", ln + 1)))?;
        if f.len() != 5 || f[0] >= n {
            return Err(Error::format(&boxes_path, format!("row {}: malformed", ln + 1)));
        }
        let b = BBox::new(f[1], f[2], f[3], f[4]).map_err(|e| Error::format(&boxes_path, e.to_string()))?;
        boxes[f[0]].push(b);
    }
    let has_boxes = boxes.iter().any(|b| !b.is_empty());

    let split = |range: std::ops::Range<usize>, tag: Split| -> Result<Dataset> {
        let images = Tensor::new(&[range.len(), c, h, w], pixels[range.start * per..range.end * per].to_vec())?;
        let bx = has_boxes.then(|| boxes[range.clone()].to_vec());
        Dataset::new(images, labels[range].to_vec(), bx, classes, tag)
    };
    Ok((split(0..n_train, Split::Train)?, split(n_train..n, Split::Test)?))
}
