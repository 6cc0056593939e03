mod common;

use common::random_tensor;
use heunflow::autodiff::{Activation, ParamStore, Tape};
use heunflow::blocks::{block_forward, block_jacobian, stack_forward, BlockSpec, Dense, Family, TransitionMap};
use heunflow::ode::{euler_step, heun_step, weighted_heun_step};
use heunflow::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

fn forward(family: Family, map: &Dense, store: &ParamStore, x: &Tensor) -> Tensor {
    let tape = Tape::inference();
    let bound = store.bind(&tape);
    let out = block_forward(family, map, &bound, tape.constant(x.clone())).unwrap();
    let v = out.value().clone();
    v
}

fn random_dense(rng: &mut ChaCha8Rng, n: usize) -> (ParamStore, Dense) {
    let mut store = ParamStore::new();
    let act = [Activation::Tanh, Activation::Sigmoid, Activation::Relu, Activation::Identity][rng.gen_range(0..4)];
    let map = Dense::init(&mut store, "f", n, act, rng.gen_bool(0.5), rng.gen_range(0.1..3.0), rng);
    (store, map)
}

#[test]
fn extended_heun_reduces_bitwise_on_1000_instances() {
    for seed in 0..1000 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..9);
        let (store, map) = random_dense(&mut rng, n);
        let rows = rng.gen_range(1..4);
        let x = random_tensor(&mut rng, &[rows, n], 3.0);
        let resnet = forward(Family::Resnet, &map, &store, &x);
        let ext0 = forward(Family::ExtendedHeun { alpha: 0.0 }, &map, &store, &x);
        assert_eq!(bits(&resnet), bits(&ext0), "seed {seed}");
        let heun = forward(Family::Heun, &map, &store, &x);
        let ext_half = forward(Family::ExtendedHeun { alpha: 0.5 }, &map, &store, &x);
        assert_eq!(bits(&heun), bits(&ext_half), "seed {seed}");
    }
}

#[test]
fn blocks_match_solver_steps_with_unit_step() {
    for seed in 0..300 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..7);
        let (store, map) = random_dense(&mut rng, n);
        let x = random_tensor(&mut rng, &[1, n], 2.0);
        let field = |_t: f64, v: &[f64]| -> Vec<f64> {
            let tape = Tape::inference();
            let bound = store.bind(&tape);
            let y = map.apply(&bound, tape.constant(Tensor::matrix(1, n, v.to_vec()).unwrap())).unwrap();
            let out = y.value().data().to_vec();
            out
        };
        let t = rng.gen_range(-5.0..5.0);
        let alpha = rng.gen_range(0.0..=1.0);
        let pairs = [
            (Family::Resnet, euler_step(field, t, x.data(), 1.0).unwrap()),
            (Family::Heun, heun_step(field, t, x.data(), 1.0).unwrap()),
            (Family::ExtendedHeun { alpha }, weighted_heun_step(field, t, x.data(), 1.0, alpha).unwrap()),
        ];
        for (family, expected) in pairs {
            let got = forward(family, &map, &store, &x);
            let eb: Vec<u64> = expected.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits(&got), eb, "{} seed {seed}", family.label());
        }
    }
}

fn mat_vec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(r, v)| r * v).sum()).collect()
}

fn linear_map(a: &[Vec<f64>]) -> (ParamStore, Dense) {
    let mut store = ParamStore::new();
    let map = Dense::from_weight(&mut store, "A", Tensor::from_rows(a), Activation::Identity).unwrap();
    (store, map)
}

fn rel_norm_err(got: &[f64], want: &[f64]) -> f64 {
    let num: f64 = got.iter().zip(want).map(|(g, w)| (g - w) * (g - w)).sum::<f64>().sqrt();
    let den: f64 = want.iter().map(|w| w * w).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

#[test]
fn linear_maps_match_closed_forms() {
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=8);
        let a: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ax = mat_vec(&a, &x);
        let aax = mat_vec(&a, &ax);
        let (store, map) = linear_map(&a);
        let xt = Tensor::matrix(1, n, x.clone()).unwrap();

        let want: Vec<f64> = (0..n).map(|i| x[i] + ax[i] + 0.5 * aax[i]).collect();
        let got = forward(Family::Heun, &map, &store, &xt);
        assert!(rel_norm_err(got.data(), &want) < 1e-12, "heun seed {seed}");

        let alpha = rng.gen_range(0.0..=1.0);
        let want: Vec<f64> = (0..n).map(|i| x[i] + ax[i] + alpha * aax[i]).collect();
        let got = forward(Family::ExtendedHeun { alpha }, &map, &store, &xt);
        assert!(rel_norm_err(got.data(), &want) < 1e-12, "extheun seed {seed}");
    }
}

#[test]
fn linear_resnet_stack_is_a_matrix_power() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 5;
    let a: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect()).collect();
    let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (store, map) = linear_map(&a);
    let depth = 6;
    let mut want = x.clone();
    for _ in 0..depth {
        let ax = mat_vec(&a, &want);
        want = want.iter().zip(&ax).map(|(w, d)| w + d).collect();
    }
    let tape = Tape::inference();
    let bound = store.bind(&tape);
    let spec = BlockSpec::new(Family::Resnet, depth, true).unwrap();
    let (out, states) = stack_forward(&spec, &[map], &bound, tape.constant(Tensor::matrix(1, n, x).unwrap())).unwrap();
    assert_eq!(states.len(), depth + 1);
    assert!(rel_norm_err(out.value().data(), &want) < 1e-12);
}

/// Least-squares slope of log(y) against log(x).
fn log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[test]
fn jacobian_approaches_identity_linearly_in_weight_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 6;
    let base = random_tensor(&mut rng, &[n, n], 1.0);
    let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for family in [Family::Resnet, Family::Heun, Family::ExtendedHeun { alpha: 0.8 }] {
        let mut points = Vec::new();
        for s in [1e-2, 1e-3, 1e-4] {
            let mut store = ParamStore::new();
            let map = Dense::from_weight(&mut store, "f", base.map(|w| w * s), Activation::Tanh).unwrap();
            let jac = block_jacobian(family, &map, &store, &x).unwrap();
            let dist = jac
                .zip_map(&Tensor::identity(n), "sub", |a, b| a - b)
                .unwrap()
                .frobenius_norm();
            points.push((s, dist));
        }
        let slope = log_slope(&points);
        assert!(slope >= 0.9, "{}: slope {slope}", family.label());
    }
}

#[test]
fn block_jacobian_matches_finite_differences() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..6);
        let mut store = ParamStore::new();
        let map = Dense::init(&mut store, "f", n, Activation::Tanh, true, 1.5, &mut rng);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let family = [Family::Plain, Family::Resnet, Family::Heun, Family::ExtendedHeun { alpha: rng.gen_range(0.0..=1.0) }]
            [rng.gen_range(0..4)];
        let jac = block_jacobian(family, &map, &store, &x).unwrap();
        let eps = 1e-6;
        let mut fd = vec![0.0; n * n];
        for j in 0..n {
            let mut up = x.clone();
            up[j] += eps;
            let mut down = x.clone();
            down[j] -= eps;
            let fu = forward(family, &map, &store, &Tensor::matrix(1, n, up).unwrap());
            let fdn = forward(family, &map, &store, &Tensor::matrix(1, n, down).unwrap());
            for i in 0..n {
                fd[i * n + j] = (fu.data()[i] - fdn.data()[i]) / (2.0 * eps);
            }
        }
        let err = rel_norm_err(jac.data(), &fd);
        assert!(err < 1e-5, "seed {seed} {}: {err:e}", family.label());
    }
}

/// Ratio of the input-gradient norm to the output-gradient norm through a
/// depth-20 stack with shared weights.
fn gradient_ratio(family: Family, weight: &Tensor, x: &Tensor, upstream: &Tensor) -> f64 {
    let mut store = ParamStore::new();
    let map = Dense::from_weight(&mut store, "f", weight.clone(), Activation::Tanh).unwrap();
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let x0 = tape.var(x.clone());
    let spec = BlockSpec::new(family, 20, true).unwrap();
    let (out, _) = stack_forward(&spec, &[map], &bound, x0).unwrap();
    let loss = out.mul(tape.constant(upstream.clone())).unwrap().sum();
    let grads = tape.backward(loss).unwrap();
    grads.wrt_or_zero(x0).frobenius_norm() / upstream.frobenius_norm()
}

#[test]
fn deep_heun_stack_keeps_gradients_while_plain_stack_loses_them() {
    let n = 8;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = random_tensor(&mut rng, &[n, n], 0.02 / (n as f64).sqrt());
        let x = random_tensor(&mut rng, &[1, n], 1.0);
        let upstream = random_tensor(&mut rng, &[1, n], 1.0);
        let heun = gradient_ratio(Family::Heun, &weight, &x, &upstream);
        assert!((0.5..=2.0).contains(&heun), "seed {seed}: heun ratio {heun}");
        let plain = gradient_ratio(Family::Plain, &weight, &x, &upstream);
        assert!(plain < 0.1, "seed {seed}: plain ratio {plain}");
    }
}

proptest! {
    #[test]
    fn zero_alpha_and_half_alpha_identities(
        w in proptest::collection::vec(-2.0f64..2.0, 9),
        x in proptest::collection::vec(-5.0f64..5.0, 3),
    ) {
        let mut store = ParamStore::new();
        let map = Dense::from_weight(&mut store, "f", Tensor::matrix(3, 3, w).unwrap(), Activation::Tanh).unwrap();
        let xt = Tensor::matrix(1, 3, x).unwrap();
        prop_assert_eq!(
            bits(&forward(Family::Resnet, &map, &store, &xt)),
            bits(&forward(Family::ExtendedHeun { alpha: 0.0 }, &map, &store, &xt))
        );
        prop_assert_eq!(
            bits(&forward(Family::Heun, &map, &store, &xt)),
            bits(&forward(Family::ExtendedHeun { alpha: 0.5 }, &map, &store, &xt))
        );
    }
}
