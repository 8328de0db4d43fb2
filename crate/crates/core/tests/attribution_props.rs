use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgdrop_core::attribution::{
    grad_cam, grad_cam_latent, latent_attribution, latent_attribution_batch, reduce_and_upsample, Score, Source,
};
use sgdrop_core::nn::{ArchPreset, LayerSpec, Model};
use sgdrop_core::sgdrop::compute_mask;
use sgdrop_core::Tensor64;

fn linear_head(fs: [usize; 3], classes: usize, rng: &mut ChaCha8Rng) -> Model<f64> {
    Model::new(
        "linear-head",
        vec![LayerSpec::Identity],
        vec![LayerSpec::Flatten, LayerSpec::linear(classes)],
        fs,
        classes,
        rng,
    )
    .unwrap()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attribution_is_nonnegative(seed: u64, score_prob: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::<f64>::from_preset(&ArchPreset::CnnTiny, [1, 8, 8], 3, &mut rng).unwrap();
        let x = Tensor64::from_fn(&[4, 1, 8, 8], |_| rng.random_range(-1.0..1.0));
        let z = model.forward_encoder(&x).unwrap();
        let score = if score_prob { Score::Prob } else { Score::Logit };
        let a = latent_attribution_batch(&model, &z, &[0, 1, 2, 1], score).unwrap();
        prop_assert!(a.data().iter().all(|&v| v >= 0.0));
    }

    /// Scaling the final linear weights by λ scales attribution by λ, keeps
    /// its ranking and therefore the mask.
    #[test]
    fn final_layer_scaling(seed: u64, lambda in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = linear_head([4, 3, 3], 3, &mut rng);
        let z = Tensor64::from_fn(&[4, 3, 3], |_| rng.random_range(-1.0..1.0));
        let mut scaled = model.clone();
        for v in scaled.params_mut()[0].value.data_mut() {
            *v *= lambda;
        }
        let a = latent_attribution(&model, &z, 1, Score::Logit, Source::Live).unwrap().values;
        let b = latent_attribution(&scaled, &z, 1, Score::Logit, Source::Live).unwrap().values;
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x * lambda - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
        for rho in [0.1, 0.3, 0.5] {
            prop_assert_eq!(compute_mask(&a, rho).unwrap().bits, compute_mask(&b, rho).unwrap().bits);
        }
    }

    #[test]
    fn attribution_leaves_parameters_untouched(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::<f64>::from_preset(&ArchPreset::CnnTiny, [1, 8, 8], 2, &mut rng).unwrap();
        let before: Vec<Vec<u64>> = model.params().iter().map(|p| p.value.data().iter().map(|v| v.to_bits()).collect()).collect();
        let x = Tensor64::from_fn(&[2, 1, 8, 8], |_| rng.random_range(-1.0..1.0));
        let z = model.forward_encoder(&x).unwrap();
        latent_attribution_batch(&model, &z, &[0, 1], Score::Logit).unwrap();
        grad_cam(&model, &x.slice_outer(0, 1).unwrap(), 1, Score::Prob).unwrap();
        let after: Vec<Vec<u64>> = model.params().iter().map(|p| p.value.data().iter().map(|v| v.to_bits()).collect()).collect();
        prop_assert_eq!(before, after);
    }
}

#[test]
fn linear_head_attribution_is_relu_of_weight_times_feature() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = linear_head([2, 2, 2], 2, &mut rng);
    let z = Tensor64::from_fn(&[2, 2, 2], |_| rng.random_range(-1.0..1.0));
    let a = latent_attribution(&model, &z, 1, Score::Logit, Source::Live).unwrap();
    let w = &model.params()[0].value;
    for j in 0..8 {
        assert_eq!(a.values.data()[j], (w.data()[8 + j] * z.data()[j]).max(0.0));
    }
}

/// With a one-channel feature map and a spatially constant class gradient,
/// Grad-CAM and the reduced latent attribution are the same map.
#[test]
fn grad_cam_and_latent_agree_on_the_peak_for_one_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let mut model = Model::<f64>::new(
            "one-channel",
            vec![LayerSpec::conv(1, 3, 1, 1), LayerSpec::Relu, LayerSpec::maxpool(2, 2)],
            vec![LayerSpec::Flatten, LayerSpec::linear(2)],
            [1, 8, 8],
            2,
            &mut rng,
        )
        .unwrap();
        let fill: f64 = rng.random_range(0.1..1.0);
        for v in model.params_mut()[2].value.data_mut().iter_mut() {
            *v = fill;
        }
        let x = Tensor64::from_fn(&[1, 1, 8, 8], |_| rng.random_range(0.0..1.0));
        let cam = grad_cam(&model, &x, 0, Score::Logit).unwrap();
        let z = model.forward_encoder(&x).unwrap();
        let a = latent_attribution(&model, &z, 0, Score::Logit, Source::Live).unwrap();
        let lat = reduce_and_upsample(&a.values, (8, 8)).unwrap();
        assert_eq!(argmax(&cam.values), argmax(&lat.values));
    }
}

/// Grad-CAM against a direct formula for a linear head: the channel weight is
/// the spatial mean of that class's weight block.
#[test]
fn grad_cam_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let model = Model::<f64>::new(
            "cam",
            vec![LayerSpec::conv(3, 3, 1, 1), LayerSpec::Relu],
            vec![LayerSpec::Flatten, LayerSpec::linear(4)],
            [2, 5, 5],
            4,
            &mut rng,
        )
        .unwrap();
        let x = Tensor64::from_fn(&[1, 2, 5, 5], |_| rng.random_range(-1.0..1.0));
        let c = rng.random_range(0..4);
        let z = model.forward_encoder(&x).unwrap();
        let w = &model.params()[2].value;
        let mut oracle = vec![0.0; 25];
        for k in 0..3 {
            let block = &w.data()[c * 75 + k * 25..c * 75 + (k + 1) * 25];
            let alpha = block.iter().sum::<f64>() / 25.0;
            for p in 0..25 {
                oracle[p] += alpha * z.data()[k * 25 + p];
            }
        }
        let (h, wd, map) = grad_cam_latent(&model, &x, c, Score::Logit).unwrap();
        assert_eq!((h, wd), (5, 5));
        for p in 0..25 {
            assert!((map[p] - oracle[p].max(0.0)).abs() < 1e-5);
        }
    }
}
