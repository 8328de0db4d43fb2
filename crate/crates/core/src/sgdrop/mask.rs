//! Top-ρ saliency masks.

use std::cmp::Ordering;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Binary keep-mask for one sample: 0 on dropped features, 1 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct DropMask<T> {
    pub bits: Tensor<T>,
    pub drop_count: usize,
    /// Dropped features whose attribution was exactly zero (forced by ties).
    pub zero_attribution_drops: usize,
}

/// Number of features dropped out of `d` at fraction `rho`: `⌊ρ·d⌋`.
pub fn drop_count(rho: f64, d: usize) -> usize {
    ((rho * d as f64).floor() as usize).min(d)
}

/// Descending by value, then ascending by flat index. NaN ranks last.
#[inline]
fn rank_order<T: Scalar>(values: &[T], a: usize, b: usize) -> Ordering {
    let (va, vb) = (values[a], values[b]);
    let by_value = match (va.is_nan(), vb.is_nan()) {
        (true, true) => Ordering::Equal,
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
        (false, false) => vb.partial_cmp(&va).unwrap_or(Ordering::Equal),
    };
    by_value.then(a.cmp(&b))
}

/// Flat indices of the `k` largest values, ties broken by smallest index.
/// The returned indices are sorted ascending.
pub fn top_k_indices<T: Scalar>(values: &[T], k: usize) -> Vec<usize> {
    let k = k.min(values.len());
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(values, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

/// Mask zeroing exactly `⌊ρ·d⌋` features: the largest attribution values,
/// smallest flat index first among ties.
pub fn compute_mask<T: Scalar>(attribution: &Tensor<T>, rho: f64) -> Result<DropMask<T>> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Config(format!("rho {rho} outside [0, 1)")));
    }
    let values = attribution.data();
    let k = drop_count(rho, values.len());
    let mut bits = Tensor::ones(attribution.shape());
    let mut zero_attribution_drops = 0;
    for i in top_k_indices(values, k) {
        bits.data_mut()[i] = T::zero();
        if values[i] == T::zero() {
            zero_attribution_drops += 1;
        }
    }
    Ok(DropMask {
        bits,
        drop_count: k,
        zero_attribution_drops,
    })
}

/// Per-sample masks for an `(N, ...)` batch, stacked into one tensor.
pub fn compute_batch_masks<T: Scalar>(attribution: &Tensor<T>, rho: f64) -> Result<(Tensor<T>, Vec<DropMask<T>>)> {
    let n = attribution.shape()[0];
    let sample_shape = &attribution.shape()[1..];
    let d = attribution.numel() / n;
    let mut stacked = Vec::with_capacity(attribution.numel());
    let mut masks = Vec::with_capacity(n);
    for chunk in attribution.data().chunks_exact(d) {
        let sample = Tensor::new(if sample_shape.is_empty() { &[1] } else { sample_shape }, chunk.to_vec())?;
        let m = compute_mask(&sample, rho)?;
        stacked.extend_from_slice(m.bits.data());
        masks.push(m);
    }
    Ok((Tensor::new(attribution.shape(), stacked)?, masks))
}

/// `z ⊙ m` with the mask recorded as a constant, so `∂/∂z` is `m`. No rescaling.
pub fn apply_mask<T: Scalar>(g: &mut Graph<T>, z: Var, mask: &Tensor<T>) -> Result<Var> {
    if g.value(z).shape() != mask.shape() {
        return Err(Error::shape(
            "apply_mask",
            format!("features {:?} vs mask {:?}", g.value(z).shape(), mask.shape()),
        ));
    }
    let m = g.constant(mask.detach());
    g.mul(z, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_drop_count() {
        // VGG16's 512×7×7 map at rho = 0.01
        assert_eq!(drop_count(0.01, 512 * 7 * 7), 250);
        let a = Tensor::<f32>::from_fn(&[512, 7, 7], |i| ((i * 7919) % 25088) as f32);
        let m = compute_mask(&a, 0.01).unwrap();
        assert_eq!(m.drop_count, 250);
        assert_eq!(m.bits.data().iter().filter(|&&b| b == 0.0).count(), 250);
    }

    #[test]
    fn small_examples() {
        let a = Tensor::<f64>::from_f64(&[4], &[0.1, 0.5, 0.3, 0.0]).unwrap();
        assert_eq!(compute_mask(&a, 0.25).unwrap().bits.data(), &[1.0, 0.0, 1.0, 1.0]);
        let m = compute_mask(&a, 0.0).unwrap();
        assert_eq!(m.drop_count, 0);
        assert!(m.bits.data().iter().all(|&b| b == 1.0));
        assert!(compute_mask(&a, 1.0).is_err());
    }

    #[test]
    fn ties_drop_smallest_index_first() {
        let a = Tensor::<f64>::from_f64(&[5], &[0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let m = compute_mask(&a, 0.4).unwrap();
        assert_eq!(m.bits.data(), &[0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(m.zero_attribution_drops, 2);

        let a = Tensor::<f64>::from_f64(&[5], &[1.0, 2.0, 2.0, 0.5, 2.0]).unwrap();
        let m = compute_mask(&a, 0.4).unwrap();
        assert_eq!(m.bits.data(), &[1.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(m.zero_attribution_drops, 0);
    }

    #[test]
    fn mask_application() {
        let mut g = Graph::<f64>::new();
        let z = g.leaf(Tensor::from_f64(&[4], &[1.0, -2.0, 3.0, 4.0]).unwrap().with_requires_grad(true));
        let ones = Tensor::ones(&[4]);
        let same = apply_mask(&mut g, z, &ones).unwrap();
        assert_eq!(g.value(same).data(), g.value(z).data());
        let mask = Tensor::from_f64(&[4], &[1.0, 0.0, 1.0, 0.0]).unwrap();
        let masked = apply_mask(&mut g, z, &mask).unwrap();
        assert_eq!(g.value(masked).data(), &[1.0, 0.0, 3.0, 0.0]);
        assert!(apply_mask(&mut g, z, &Tensor::ones(&[3])).is_err());
    }
}
