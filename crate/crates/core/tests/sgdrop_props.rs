use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgdrop_core::attribution::Score;
use sgdrop_core::nn::{ArchPreset, LrSchedule, Model, Optimizer, OptimizerKind};
use sgdrop_core::sgdrop::{compute_mask, drop_count, sgdrop_masks, sgdrop_step, EmaState, RhoSchedule, SgdropConfig};
use sgdrop_core::train::{cross_entropy_value, vanilla_step};
use sgdrop_core::Tensor64;

/// Indices of the k largest values by a full stable sort: descending value,
/// ascending index.
fn sort_oracle(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    let mut top = idx[..k].to_vec();
    top.sort_unstable();
    top
}

#[test]
fn mask_matches_full_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..1000 {
        let d = rng.random_range(1..=512);
        // Coarse values force plenty of ties.
        let levels = if trial % 2 == 0 { 4 } else { 1 << 20 };
        let values: Vec<f64> = (0..d).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let a = Tensor64::new(&[d], values.clone()).unwrap();
        for rho in [0.01, 0.1, 0.5] {
            let k = (rho * d as f64).floor() as usize;
            let m = compute_mask(&a, rho).unwrap();
            let zeros: Vec<usize> = (0..d).filter(|&i| m.bits.data()[i] == 0.0).collect();
            assert_eq!(zeros.len(), k);
            assert_eq!(m.drop_count, k);
            assert_eq!(zeros, sort_oracle(&values, k), "trial {trial} d {d} rho {rho}");
            assert!(m.bits.data().iter().all(|&b| b == 0.0 || b == 1.0));
        }
    }
}

#[test]
fn vgg16_scale_drop_count() {
    assert_eq!(drop_count(0.01, 512 * 7 * 7), 250);
    let a = Tensor64::from_fn(&[512, 7, 7], |i| ((i * 7919) % 25088) as f64);
    let m = compute_mask(&a, 0.01).unwrap();
    assert_eq!(m.bits.data().iter().filter(|&&b| b == 0.0).count(), 250);
}

fn setup(seed: u64) -> (Model<f64>, Tensor64, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::<f64>::from_preset(&ArchPreset::CnnTiny, [1, 8, 8], 3, &mut rng).unwrap();
    let x = Tensor64::from_fn(&[4, 1, 8, 8], |_| rng.random_range(0.0..1.0));
    let labels = (0..4).map(|_| rng.random_range(0..3)).collect();
    (model, x, labels)
}

fn adam() -> Optimizer<f64> {
    Optimizer::new(OptimizerKind::adam(1e-3), LrSchedule::Constant).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// The reported loss equals −mean log softmax(ψ(z ⊙ m))[c] computed
    /// from scratch with the teacher's mask.
    #[test]
    fn step_loss_is_the_masked_cross_entropy(seed: u64, rho in 0.01f64..0.6) {
        let (mut model, x, labels) = setup(seed);
        let config = SgdropConfig { rho: RhoSchedule::Constant(rho), ..Default::default() };
        let mut ema = EmaState::new(&model, config.ema_decay).unwrap();
        let (mask, _) = sgdrop_masks(ema.shadow(), &x, &labels, rho, Score::Logit).unwrap();
        let z = model.forward_encoder(&x).unwrap();
        let zm = z.zip_map(&mask, "mask", |a, b| a * b).unwrap();
        let logits = model.forward_classifier(&zm).unwrap();
        let mut manual = 0.0;
        for (row, &c) in logits.data().chunks(3).zip(&labels) {
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            manual -= (row[c].exp() / denom).ln();
        }
        manual /= labels.len() as f64;
        prop_assert!((manual - cross_entropy_value(&logits, &labels).unwrap()).abs() < 1e-12);

        let mut opt = adam();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stats = sgdrop_step(&mut model, Some(&mut ema), &x, &labels, &config, &mut opt, 0, 1, &mut rng).unwrap();
        prop_assert!((stats.loss - manual).abs() < 1e-6, "{} vs {}", stats.loss, manual);
        prop_assert_eq!(stats.drop_count, drop_count(rho, model.feature_len()));
    }

    /// ρ = 0 drops nothing, so the step equals a vanilla step exactly.
    #[test]
    fn rho_zero_step_equals_vanilla(seed: u64) {
        let (model, x, labels) = setup(seed);
        let config = SgdropConfig { rho: RhoSchedule::Constant(0.0), ..Default::default() };
        let mut a = model.clone();
        let mut ema = EmaState::new(&a, 0.99).unwrap();
        let mut opt_a = adam();
        let sa = sgdrop_step(&mut a, Some(&mut ema), &x, &labels, &config, &mut opt_a, 0, 1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut b = model.clone();
        let mut opt_b = adam();
        let sb = vanilla_step(&mut b, &x, &labels, &mut opt_b, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        prop_assert_eq!(sa.loss.to_bits(), sb.loss.to_bits());
        prop_assert_eq!(a.state(), b.state());
    }

    /// The teacher pass never writes to θ.
    #[test]
    fn teacher_pass_is_read_only(seed: u64) {
        let (model, x, labels) = setup(seed);
        let before = model.state();
        sgdrop_masks(&model, &x, &labels, 0.3, Score::Prob).unwrap();
        prop_assert_eq!(before, model.state());
    }
}

/// With θ held fixed, ‖θ′_t − θ‖ = α^t ‖θ′_0 − θ‖.
#[test]
fn ema_decays_geometrically_towards_fixed_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let start = Model::<f64>::from_preset(&ArchPreset::CnnTiny, [1, 8, 8], 2, &mut rng).unwrap();
    let target = Model::<f64>::from_preset(&ArchPreset::CnnTiny, [1, 8, 8], 2, &mut rng).unwrap();
    let dist = |a: &Model<f64>| -> f64 {
        a.params()
            .iter()
            .zip(target.params())
            .flat_map(|(p, q)| p.value.data().iter().zip(q.value.data()).map(|(x, y)| (x - y) * (x - y)))
            .sum::<f64>()
            .sqrt()
    };
    for alpha in [0.5, 0.9, 0.99] {
        let mut ema = EmaState::new(&start, alpha).unwrap();
        let d0 = dist(ema.shadow());
        for t in 1..=50 {
            ema.update(&target).unwrap();
            let expected = alpha.powi(t) * d0;
            assert!((dist(ema.shadow()) - expected).abs() <= 1e-10 * d0, "alpha {alpha} t {t}");
        }
    }
}

/// Without EMA the teacher is θ itself; after one update the two teachers,
/// and hence their masks, differ.
#[test]
fn ema_and_live_teachers_diverge_after_one_step() {
    let (model, x, labels) = setup(5);
    let config = SgdropConfig { rho: RhoSchedule::Constant(0.2), ..Default::default() };
    let mut with_ema = model.clone();
    let mut ema = EmaState::new(&with_ema, 0.99).unwrap();
    let mut opt = adam();
    sgdrop_step(&mut with_ema, Some(&mut ema), &x, &labels, &config, &mut opt, 0, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();

    let live_config = SgdropConfig { use_ema: false, ..config };
    let mut live = model.clone();
    let mut opt = adam();
    sgdrop_step(&mut live, None, &x, &labels, &live_config, &mut opt, 0, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(live.state(), with_ema.state());

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x2 = Tensor64::from_fn(&[16, 1, 8, 8], |_| rng.random_range(0.0..1.0));
    let l2: Vec<usize> = (0..16).map(|i| i % 3).collect();
    let (m_ema, _) = sgdrop_masks(ema.shadow(), &x2, &l2, 0.2, Score::Logit).unwrap();
    let (m_live, _) = sgdrop_masks(&live, &x2, &l2, 0.2, Score::Logit).unwrap();
    assert_ne!(m_ema, m_live);
}

#[test]
fn curriculum_endpoints_and_line() {
    let s = RhoSchedule::curriculum();
    for total in [2usize, 5, 30, 80] {
        assert_eq!(s.rho_at(0, total).unwrap(), 0.01);
        assert_eq!(s.rho_at(total - 1, total).unwrap(), 0.1);
        for e in 0..total {
            let line = 0.01 + 0.09 * e as f64 / (total - 1) as f64;
            assert!((s.rho_at(e, total).unwrap() - line).abs() <= 1e-12);
        }
        assert!(s.rho_at(total, total).is_err());
    }
}
