//! Classical (inverted) dropout.

use rand::{Rng, RngCore};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A mask whose entries are 0 with probability `p` and `1/(1-p)` otherwise.
pub fn dropout_mask<T: Scalar>(shape: &[usize], p: f64, rng: &mut dyn RngCore) -> Tensor<T> {
    let keep = T::of(1.0 / (1.0 - p));
    Tensor::from_fn(shape, |_| if rng.random::<f64>() < p { T::zero() } else { keep })
}

/// Zeroes each element of `z` independently with probability `p` and scales
/// survivors by `1/(1-p)` during training; identity otherwise.
pub fn classical_dropout<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    p: f64,
    training: bool,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(z);
    }
    let mask = dropout_mask::<T>(g.value(z).shape(), p, rng);
    let m = g.constant(mask);
    g.mul(z, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(p: f64, training: bool, n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_fn(&[n], |i| 1.0 + (i % 7) as f64));
        let y = classical_dropout(&mut g, z, p, training, &mut rng).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn identity_cases() {
        let base = run(0.0, false, 16, 0);
        assert_eq!(run(0.0, true, 16, 0), base);
        assert_eq!(run(0.9, false, 16, 0), base);
    }

    #[test]
    fn zero_fraction_concentrates() {
        // 1e6 Bernoulli(0.5) draws: sd of the fraction is 5e-4, so ±2e-3 is a 4-sigma band.
        let y = run(0.5, true, 1_000_000, 7);
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e6;
        assert!((0.498..=0.502).contains(&zeros), "{zeros}");
    }

    #[test]
    fn survivors_are_rescaled() {
        let y = run(0.25, true, 64, 3);
        let base = run(0.0, false, 64, 3);
        for (a, b) in y.data().iter().zip(base.data()) {
            assert!(*a == 0.0 || (a - b / 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn expectation_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = [0.8f64, -1.5, 2.0, -0.3, 1.1];
        let trials = 10_000;
        let mut acc = [0.0; 5];
        for _ in 0..trials {
            let m = dropout_mask::<f64>(&[5], 0.1, &mut rng);
            for (a, (zv, mv)) in acc.iter_mut().zip(z.iter().zip(m.data())) {
                *a += zv * mv;
            }
        }
        for (a, zv) in acc.iter().zip(z) {
            let mean = a / trials as f64;
            // at p = 0.1 the sd of the mean is |z|/300, so 1% is a three-sigma band
            assert!((mean - zv).abs() <= 0.01 * zv.abs(), "{mean} vs {zv}");
        }
    }
}
