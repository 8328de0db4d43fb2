use crate::attribution::SaliencyImage;
use crate::error::{Error, Result};

/// Axis-aligned pixel box, inclusive of the minimum and exclusive of the maximum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_max <= x_min || y_max <= y_min {
            return Err(Error::Config(format!(
                "degenerate box ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn area(&self) -> usize {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.x_max <= width && self.y_max <= height
    }

    pub fn intersection_area(&self, other: &BBox) -> usize {
        let w = self.x_max.min(other.x_max).saturating_sub(self.x_min.max(other.x_min));
        let h = self.y_max.min(other.y_max).saturating_sub(self.y_min.max(other.y_min));
        w * h
    }
}

/// Intersection over union; disjoint boxes give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Tight box around every pixel at or above 0.5, if any.
pub fn saliency_bbox(s: &SaliencyImage) -> Option<BBox> {
    let mut found: Option<BBox> = None;
    for y in 0..s.height {
        for x in 0..s.width {
            if s.get(y, x) >= 0.5 {
                let b = found.get_or_insert(BBox {
                    x_min: x,
                    y_min: y,
                    x_max: x + 1,
                    y_max: y + 1,
                });
                b.x_min = b.x_min.min(x);
                b.y_min = b.y_min.min(y);
                b.x_max = b.x_max.max(x + 1);
                b.y_max = b.y_max.max(y + 1);
            }
        }
    }
    found
}

/// Whether the saliency box reaches IoU ≥ 0.5 with any ground-truth box.
pub fn is_hit(s: &SaliencyImage, truth: &[BBox]) -> bool {
    saliency_bbox(s).is_some_and(|b| truth.iter().any(|t| iou(&b, t) >= 0.5))
}

/// Fraction of samples that are hits. Every sample needs at least one box;
/// samples without any pixel ≥ 0.5 count as misses.
pub fn hit_ratio(saliency: &[SaliencyImage], truth: &[Vec<BBox>]) -> Result<f64> {
    if saliency.len() != truth.len() {
        return Err(Error::Config(format!(
            "{} saliency maps vs {} box lists",
            saliency.len(),
            truth.len()
        )));
    }
    if let Some(i) = truth.iter().position(|b| b.is_empty()) {
        return Err(Error::Config(format!("sample {i} has no ground-truth box")));
    }
    if saliency.is_empty() {
        return Ok(0.0);
    }
    let hits = saliency.iter().zip(truth).filter(|(s, t)| is_hit(s, t)).count();
    Ok(hits as f64 / saliency.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, on: &[(usize, usize)]) -> SaliencyImage {
        let mut values = vec![0.0; h * w];
        for &(y, x) in on {
            values[y * w + x] = 1.0;
        }
        SaliencyImage {
            height: h,
            width: w,
            values,
        }
    }

    #[test]
    fn boxes_from_pixels() {
        let b = saliency_bbox(&image(8, 8, &[(3, 5)])).unwrap();
        assert_eq!(b, BBox::new(5, 3, 6, 4).unwrap());
        let b = saliency_bbox(&image(8, 6, &[(0, 0), (7, 5)])).unwrap();
        assert_eq!(b, BBox::new(0, 0, 6, 8).unwrap());
        assert_eq!(saliency_bbox(&image(4, 4, &[])), None);
        let mut half = image(2, 2, &[]);
        half.values[3] = 0.5;
        assert_eq!(saliency_bbox(&half), Some(BBox::new(1, 1, 2, 2).unwrap()));
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0, 0, 10, 10).unwrap();
        let b = BBox::new(5, 5, 15, 15).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(10, 0, 12, 10).unwrap()), 0.0);
        assert!((iou(&a, &b) - 25.0 / 175.0).abs() < 1e-12);
        assert_eq!(iou(&a, &b), iou(&b, &a));
        assert!(BBox::new(3, 3, 3, 4).is_err());
    }

    #[test]
    fn hit_ratio_cases() {
        let s = image(8, 8, &[(2, 2), (5, 5)]);
        let truth = vec![BBox::new(2, 2, 6, 6).unwrap()];
        assert_eq!(hit_ratio(&[s.clone()], &[truth.clone()]).unwrap(), 1.0);
        let blank = image(8, 8, &[]);
        assert_eq!(hit_ratio(&[blank], &[truth.clone()]).unwrap(), 0.0);
        assert!(hit_ratio(&[s], &[vec![]]).is_err());
    }
}
