use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgdrop_core::attribution::SaliencyImage;
use sgdrop_core::metrics::{area_ratio, iou, neuron_coverage, saliency_bbox, BBox, CoverageTracker};
use sgdrop_core::nn::{ArchPreset, LayerSpec, Model};
use sgdrop_core::Tensor64;

fn random_map(rng: &mut ChaCha8Rng) -> SaliencyImage {
    let height = rng.random_range(1..12);
    let width = rng.random_range(1..12);
    let zeros = rng.random_bool(0.05);
    let values = (0..height * width)
        .map(|_| if zeros { 0.0 } else { rng.random_range(0..5) as f64 / 4.0 })
        .collect();
    SaliencyImage { height, width, values }.normalized()
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x0 = rng.random_range(0..10);
    let y0 = rng.random_range(0..10);
    BBox::new(x0, y0, rng.random_range(x0 + 1..=12), rng.random_range(y0 + 1..=12)).unwrap()
}

#[test]
fn area_ratio_matches_pixel_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let s = random_map(&mut rng);
        let mut over = 0;
        for y in 0..s.height {
            for x in 0..s.width {
                if s.get(y, x) > 0.5 {
                    over += 1;
                }
            }
        }
        assert_eq!(area_ratio(&s), over as f64 / (s.height * s.width) as f64);
    }
}

#[test]
fn saliency_bbox_matches_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let s = random_map(&mut rng);
        let hot: Vec<(usize, usize)> = (0..s.height)
            .flat_map(|y| (0..s.width).map(move |x| (y, x)))
            .filter(|&(y, x)| s.get(y, x) >= 0.5)
            .collect();
        let expected = if hot.is_empty() {
            None
        } else {
            Some(BBox {
                x_min: hot.iter().map(|p| p.1).min().unwrap(),
                y_min: hot.iter().map(|p| p.0).min().unwrap(),
                x_max: hot.iter().map(|p| p.1).max().unwrap() + 1,
                y_max: hot.iter().map(|p| p.0).max().unwrap() + 1,
            })
        };
        assert_eq!(saliency_bbox(&s), expected);
    }
}

#[test]
fn iou_matches_pixel_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inside = |b: &BBox, y: usize, x: usize| (b.y_min..b.y_max).contains(&y) && (b.x_min..b.x_max).contains(&x);
    for _ in 0..200 {
        let a = random_box(&mut rng);
        let b = random_box(&mut rng);
        let (mut inter, mut union) = (0, 0);
        for y in 0..12 {
            for x in 0..12 {
                let (ia, ib) = (inside(&a, y, x), inside(&b, y, x));
                inter += (ia && ib) as usize;
                union += (ia || ib) as usize;
            }
        }
        assert_eq!(iou(&a, &b), inter as f64 / union as f64);
    }
    let a = BBox::new(0, 0, 10, 10).unwrap();
    let b = BBox::new(5, 5, 15, 15).unwrap();
    assert!((iou(&a, &b) - 25.0 / 175.0).abs() < 1e-12);
}

/// A 1×2×2 input through a 1×1 conv (2 channels), ReLU, then a 3-unit ReLU
/// hidden layer: every activation is written out by hand.
fn tiny_net(rng: &mut ChaCha8Rng) -> Model<f64> {
    let mut model = Model::<f64>::new(
        "tiny",
        vec![LayerSpec::conv(2, 1, 1, 0), LayerSpec::Relu],
        vec![LayerSpec::Flatten, LayerSpec::linear(3), LayerSpec::Relu, LayerSpec::linear(2)],
        [1, 2, 2],
        2,
        rng,
    )
    .unwrap();
    for p in model.params_mut() {
        for v in p.value.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    model
}

fn activation_table(model: &Model<f64>, x: &[f64]) -> (Vec<bool>, Vec<bool>) {
    let p = model.params();
    let (cw, cb, lw, lb) = (p[0].value.data(), p[1].value.data(), p[2].value.data(), p[3].value.data());
    let mut z = vec![0.0; 8];
    for k in 0..2 {
        for i in 0..4 {
            z[k * 4 + i] = (cw[k] * x[i] + cb[k]).max(0.0);
        }
    }
    let hidden: Vec<f64> = (0..3)
        .map(|j| (lb[j] + (0..8).map(|i| lw[j * 8 + i] * z[i]).sum::<f64>()).max(0.0))
        .collect();
    (z.iter().map(|&v| v > 0.0).collect(), hidden.iter().map(|&v| v > 0.0).collect())
}

#[test]
fn coverage_matches_activation_table() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let model = tiny_net(&mut rng);
        let batches: Vec<Tensor64> = (0..rng.random_range(1..4))
            .map(|_| {
                let n = rng.random_range(1..4);
                Tensor64::from_fn(&[n, 1, 2, 2], |_| rng.random_range(-1.0..1.0))
            })
            .collect();
        let mut zc = [false; 8];
        let mut hc = [false; 3];
        for b in &batches {
            for x in b.data().chunks(4) {
                let (z, h) = activation_table(&model, x);
                zc.iter_mut().zip(z).for_each(|(c, a)| *c |= a);
                hc.iter_mut().zip(h).for_each(|(c, a)| *c |= a);
            }
        }
        let zn = zc.iter().filter(|&&c| c).count();
        let hn = hc.iter().filter(|&&c| c).count();
        let (global, fm) = neuron_coverage(&model, &batches).unwrap();
        assert_eq!(fm, zn as f64 / 8.0);
        assert_eq!(global, (zn + hn) as f64 / 11.0);
    }
}

#[test]
fn zero_network_covers_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = Model::<f64>::from_preset(&ArchPreset::CnnTiny, [1, 8, 8], 2, &mut rng).unwrap();
    for p in model.params_mut() {
        p.value.data_mut().fill(0.0);
    }
    let x = Tensor64::from_fn(&[4, 1, 8, 8], |_| rng.random_range(-1.0..1.0));
    assert_eq!(neuron_coverage(&model, &[x]).unwrap(), (0.0, 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn coverage_never_shrinks_and_counts_feature_sites(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::<f64>::from_preset(&ArchPreset::CnnTiny, [1, 8, 8], 3, &mut rng).unwrap();
        let mut tracker = CoverageTracker::new();
        let (mut g, mut f) = (0.0, 0.0);
        for _ in 0..4 {
            let x = Tensor64::from_fn(&[2, 1, 8, 8], |_| rng.random_range(-1.0..1.0));
            tracker.observe(&model.trace(&x).unwrap());
            prop_assert!(tracker.global() >= g && tracker.featuremap() >= f);
            prop_assert!(tracker.featuremap() <= 1.0);
            g = tracker.global();
            f = tracker.featuremap();
        }
        prop_assert_eq!(tracker.featuremap_sites(), model.feature_shape().iter().product::<usize>());
    }

    /// Scaling a raw map by λ > 0 before normalization leaves the area ratio
    /// unchanged.
    #[test]
    fn area_ratio_is_scale_invariant(seed: u64, lambda in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..64).map(|_| rng.random_range(0..9) as f64).collect();
        let a = SaliencyImage { height: 8, width: 8, values: raw.clone() }.normalized();
        let b = SaliencyImage { height: 8, width: 8, values: raw.iter().map(|v| v * lambda).collect() }.normalized();
        prop_assert_eq!(area_ratio(&a), area_ratio(&b));
    }
}
