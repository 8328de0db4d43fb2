use std::fmt;
use std::str::FromStr;

use crate::attribution::upsample_bilinear;
use crate::error::{Error, Result};
use crate::metrics::BBox;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Images in NCHW layout, scaled to [0, 1], with labels and optional
/// per-sample ground-truth boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub boxes: Option<Vec<Vec<BBox>>>,
    pub class_count: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        boxes: Option<Vec<Vec<BBox>>>,
        class_count: usize,
        split: Split,
    ) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::shape("dataset", format!("images must be NCHW, got {:?}", images.shape())));
        }
        let n = images.shape()[0];
        if labels.len() != n {
            return Err(Error::shape("dataset", format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: class_count,
            });
        }
        if let Some(b) = &boxes {
            if b.len() != n {
                return Err(Error::shape("dataset", format!("{n} images but {} box lists", b.len())));
            }
            let (h, w) = (images.shape()[2], images.shape()[3]);
            if b.iter().flatten().any(|bb| !bb.fits(h, w)) {
                return Err(Error::Config(format!("a ground-truth box exceeds the {h}x{w} image")));
            }
        }
        Ok(Self {
            images,
            labels,
            boxes,
            class_count,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Images at `indices` converted to `T`, with their labels.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let x = self.images.gather_outer(indices)?.cast::<T>();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.gather_outer(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            boxes: self.boxes.as_ref().map(|b| indices.iter().map(|&i| b[i].clone()).collect()),
            class_count: self.class_count,
            split: self.split,
        })
    }

    /// Bilinear resize of every image to `size`×`size`. Boxes are rescaled
    /// outward so they still cover the same content.
    pub fn resized(&self, size: usize) -> Result<Self> {
        let [c, h, w] = self.image_shape();
        if size == 0 {
            return Err(Error::Config("resize target must be positive".into()));
        }
        if (h, w) == (size, size) {
            return Ok(self.clone());
        }
        let n = self.len();
        let mut data = Vec::with_capacity(n * c * size * size);
        for plane in self.images.data().chunks_exact(h * w) {
            let src: Vec<f64> = plane.iter().map(|&v| v as f64).collect();
            data.extend(upsample_bilinear(&src, h, w, size, size).into_iter().map(|v| v as f32));
        }
        let scale_x = size as f64 / w as f64;
        let scale_y = size as f64 / h as f64;
        let boxes = self.boxes.as_ref().map(|all| {
            all.iter()
                .map(|bs| {
                    bs.iter()
                        .map(|b| {
                            let x0 = (b.x_min as f64 * scale_x).floor() as usize;
                            let y0 = (b.y_min as f64 * scale_y).floor() as usize;
                            let x1 = ((b.x_max as f64 * scale_x).ceil() as usize).clamp(x0 + 1, size);
                            let y1 = ((b.y_max as f64 * scale_y).ceil() as usize).clamp(y0 + 1, size);
                            BBox {
                                x_min: x0.min(size - 1),
                                y_min: y0.min(size - 1),
                                x_max: x1,
                                y_max: y1,
                            }
                        })
                        .collect()
                })
                .collect()
        });
        Self::new(
            Tensor::new(&[n, c, size, size], data)?,
            self.labels.clone(),
            boxes,
            self.class_count,
            self.split,
        )
    }
}
