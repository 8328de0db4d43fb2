//! Neuron coverage: the share of activation sites that exceed 0 for at least
//! one evaluated input.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{ActivationTrace, Model};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Batches used by the coverage protocol: 10 random batches of 64 samples.
pub const COVERAGE_BATCHES: usize = 10;
pub const COVERAGE_BATCH_SIZE: usize = 64;

/// Running union of activated sites. Each ReLU output site (per channel and
/// position for conv maps) counts once; the latent map is tracked separately.
#[derive(Debug, Clone, Default)]
pub struct CoverageTracker {
    layers: Vec<Vec<bool>>,
    features: Vec<bool>,
}

impl CoverageTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe<T: Scalar>(&mut self, trace: &ActivationTrace<T>) {
        if self.layers.is_empty() {
            self.layers = trace
                .relu_outputs
                .iter()
                .map(|t| vec![false; t.numel() / t.shape()[0]])
                .collect();
            self.features = vec![false; trace.features.numel() / trace.features.shape()[0]];
        }
        for (sites, t) in self.layers.iter_mut().zip(&trace.relu_outputs) {
            mark(sites, t);
        }
        mark(&mut self.features, &trace.features);
    }

    /// Covered fraction over all ReLU sites.
    pub fn global(&self) -> f64 {
        let total: usize = self.layers.iter().map(Vec::len).sum();
        let covered: usize = self.layers.iter().map(|l| l.iter().filter(|&&c| c).count()).sum();
        if total == 0 {
            0.0
        } else {
            covered as f64 / total as f64
        }
    }

    /// Covered fraction over the latent feature map only.
    pub fn featuremap(&self) -> f64 {
        if self.features.is_empty() {
            return 0.0;
        }
        self.features.iter().filter(|&&c| c).count() as f64 / self.features.len() as f64
    }

    pub fn featuremap_sites(&self) -> usize {
        self.features.len()
    }
}

fn mark<T: Scalar>(sites: &mut [bool], t: &Tensor<T>) {
    let per = sites.len();
    for sample in t.data().chunks_exact(per) {
        for (s, &v) in sites.iter_mut().zip(sample) {
            *s |= v > T::zero();
        }
    }
}

/// `(global, featuremap)` coverage of `model` over the given input batches.
pub fn neuron_coverage<T: Scalar>(model: &Model<T>, batches: &[Tensor<T>]) -> Result<(f64, f64)> {
    let mut tracker = CoverageTracker::new();
    for b in batches {
        tracker.observe(&model.trace(b)?);
    }
    Ok((tracker.global(), tracker.featuremap()))
}

/// Sample indices for the coverage protocol, clamped to `n` samples.
pub fn coverage_indices(n: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(COVERAGE_BATCHES * COVERAGE_BATCH_SIZE);
    idx.chunks(COVERAGE_BATCH_SIZE).map(<[usize]>::to_vec).collect()
}
