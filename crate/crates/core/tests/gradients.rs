use eoir::autodiff::{gradient_check, Tape, Tensor, NORM_EPS};
use eoir::grid::{GridSpec, ScalarField};
use eoir::net::{self, ModelConfig, ModelParams};
use eoir::objectives::LossConfig;
use eoir::selfcheck::{self, FD_STEP, GRADIENT_TOLERANCE};
use eoir::synth::{self, PhantomKind};
use eoir::train::{loss_and_gradients, TrainingPair};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn every_operation_matches_finite_differences() {
    let checks = selfcheck::operation_gradient_checks().unwrap();
    assert_eq!(checks.len(), 27);
    for (name, report) in checks {
        assert!(report.max_rel_error < 1e-6, "{name}: {report:?}");
        assert!(report.coords_checked > 0, "{name}");
    }
}

#[test]
fn registration_loss_matches_finite_differences() {
    let report = selfcheck::pipeline_gradient_check().unwrap();
    assert!(report.passes(GRADIENT_TOLERANCE), "{report:?}");
}

#[test]
fn hadamard_pair_twice_doubles_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let a = tape.leaf(uniform(vec![3, 4, 5], -1.0, 1.0, &mut rng), false);
    let b = tape.leaf(uniform(vec![3, 4, 5], -1.0, 1.0, &mut rng), false);
    let (s, d) = tape.hadamard_pair(a, b).unwrap();
    let (ss, dd) = tape.hadamard_pair(s, d).unwrap();
    for (x, y) in tape.value(ss).data().iter().zip(tape.value(a).data()) {
        assert_eq!(*x, 2.0 * y);
    }
    for (x, y) in tape.value(dd).data().iter().zip(tape.value(b).data()) {
        assert_eq!(*x, 2.0 * y);
    }
}

#[test]
fn repeated_passes_are_bit_identical() {
    let grid = GridSpec::isotropic(&[24, 24]).unwrap();
    let phantom = synth::make_phantom(PhantomKind::Blobs, &grid, 2).unwrap();
    let warp = synth::random_diffeo(&grid, 2.0, 3.0, 3).unwrap();
    let (moving, fixed) = synth::make_pair(&phantom, &warp).unwrap();
    let config = ModelConfig { start_channels: 4, levels: 2, ndim: 2, ..ModelConfig::default() };
    let mut params = ModelParams::init(&config, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.01..0.01);
        }
    }
    let pair = TrainingPair::new(moving.image, fixed.image);
    let loss = LossConfig { levels: 2, ncc_window: 5, ..LossConfig::default() };
    let (l1, g1, _) = loss_and_gradients(&params, &pair, &loss).unwrap();
    let (l2, g2, _) = loss_and_gradients(&params, &pair, &loss).unwrap();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1, g2);
    assert!(g1.iter().flatten().any(|&g| g != 0.0));
}

#[test]
fn coarser_levels_ignore_finer_estimators() {
    let grid = GridSpec::isotropic(&[32, 32]).unwrap();
    let phantom = synth::make_phantom(PhantomKind::Blobs, &grid, 6).unwrap();
    let warp = synth::random_diffeo(&grid, 2.0, 4.0, 7).unwrap();
    let (moving, fixed) = synth::make_pair(&phantom, &warp).unwrap();
    let config = ModelConfig { start_channels: 4, levels: 3, ndim: 2, ..ModelConfig::default() };
    let mut params = ModelParams::init(&config, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let names = params.names().to_vec();
    for name in names.iter().filter(|n| n.contains(".flow.")) {
        for v in params.get_mut(name).unwrap().data_mut() {
            *v = rng.random_range(-0.05..0.05);
        }
    }
    let base = net::register(&moving.image, &fixed.image, &params).unwrap();
    for l in 1..=2usize {
        let mut bumped = params.clone();
        for v in bumped.get_mut(&format!("estimator.{l}.flow.weight")).unwrap().data_mut() {
            *v += 0.01;
        }
        let out = net::register(&moving.image, &fixed.image, &bumped).unwrap();
        for k in l..3 {
            assert_eq!(out.residuals[k], base.residuals[k], "level {} moved", k + 1);
        }
        assert_ne!(out.residuals[l - 1], base.residuals[l - 1]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn fresh_models_return_identity(seed in any::<u64>(), levels in 1usize..4, channels in 1usize..5, ndim in 2usize..4) {
        let dims = if ndim == 2 { vec![16, 16] } else { vec![12, 12, 12] };
        let grid = GridSpec::isotropic(&dims).unwrap();
        let config = ModelConfig { start_channels: channels, levels, ndim, ..ModelConfig::default() };
        let params = ModelParams::init(&config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut image = || ScalarField::from_fn(grid.clone(), |_| rng.random_range(0.0..1.0)).unwrap();
        let (moving, fixed) = (image(), image());
        let out = net::register(&moving, &fixed, &params).unwrap();
        prop_assert_eq!(out.levels(), levels);
        for (l, phi) in out.phis.iter().enumerate() {
            prop_assert!(phi.is_identity());
            let expect: Vec<usize> = dims.iter().map(|d| d >> l).collect();
            prop_assert_eq!(phi.grid().dims(), &expect[..]);
        }
        prop_assert_eq!(&out.warped, &moving);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn conv_gradients(seed in any::<u64>(), cin in 1usize..4, cout in 1usize..4, ndim in 2usize..4, k in prop_oneof![Just(1usize), Just(3)]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spatial: Vec<usize> = (0..ndim).map(|_| rng.random_range(3..6)).collect();
        let mut xs = vec![cin];
        xs.extend(&spatial);
        let mut ws = vec![cout, cin];
        ws.extend(vec![k; ndim]);
        let inputs = vec![uniform(xs, -1.0, 1.0, &mut rng), uniform(ws, -0.5, 0.5, &mut rng), uniform(vec![cout], -0.5, 0.5, &mut rng)];
        let r = gradient_check(|t, v| t.conv(v[0], v[1], v[2]), &inputs, FD_STEP).unwrap();
        prop_assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn instance_norm_gradients(seed in any::<u64>(), c in 1usize..4, h in 3usize..7, w in 3usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![uniform(vec![c, h, w], -1.0, 1.0, &mut rng), uniform(vec![c], 0.5, 1.5, &mut rng), uniform(vec![c], -0.5, 0.5, &mut rng)];
        let r = gradient_check(|t, v| t.instance_norm(v[0], v[1], v[2], NORM_EPS), &inputs, FD_STEP).unwrap();
        prop_assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn warp_gradients(seed in any::<u64>(), c in 1usize..3, ndim in 2usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spatial: Vec<usize> = (0..ndim).map(|_| rng.random_range(4..7)).collect();
        let mut fs = vec![c];
        fs.extend(&spatial);
        let mut us = vec![ndim];
        us.extend(&spatial);
        let inputs = vec![uniform(fs, -1.0, 1.0, &mut rng), uniform(us, -1.5, 1.5, &mut rng)];
        let r = gradient_check(|t, v| t.warp(v[0], v[1]), &inputs, FD_STEP).unwrap();
        prop_assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
