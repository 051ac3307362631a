use hhgcn::autodiff::{ParamKind, ParamSet, Tape};
use hhgcn::optimizer::*;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.sample::<f64, _>(StandardNormal))
}

fn max_abs(m: &Array2<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

#[test]
fn ten_thousand_steps_stay_orthonormal() {
    for (n, seed) in [(4, 1u64), (8, 2), (16, 3)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = orthogonal_init(n, n, seed).unwrap();
        for _ in 0..10_000 {
            let g = gaussian(&mut rng, n, n);
            w = riemannian_step(&w, &g, 0.1).unwrap();
        }
        let err = w.orthonormality_error();
        assert!(err < STIEFEL_TOL, "n={n}: {err:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn projection_is_tangent(seed in any::<u64>(), n in 2usize..10, scale in 0.01..100.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = orthogonal_init(n, n, seed).unwrap();
        let g = gaussian(&mut rng, n, n) * scale;
        let p = tangent_project(&w, &g).unwrap();
        let m = w.as_array().t().dot(&p);
        prop_assert!(max_abs(&(&m + &m.t())) < 1e-10 * scale.max(1.0));
    }

    #[test]
    fn projection_is_idempotent(seed in any::<u64>(), n in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = orthogonal_init(n, n, seed).unwrap();
        let p = tangent_project(&w, &gaussian(&mut rng, n, n)).unwrap();
        let pp = tangent_project(&w, &p).unwrap();
        prop_assert!(max_abs(&(&pp - &p)) < 1e-12);
    }

    #[test]
    fn qf_is_idempotent_on_orthonormal_input(seed in any::<u64>(), n in 1usize..10) {
        let w = orthogonal_init(n, n, seed).unwrap();
        let q = qf(w.as_array()).unwrap();
        prop_assert!(max_abs(&(&q - w.as_array())) < 1e-12);
    }

    #[test]
    fn qf_has_positive_diagonal_r(seed in any::<u64>(), n in 1usize..8) {
        // R = Q^T M must be upper triangular with a positive diagonal.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = gaussian(&mut rng, n, n);
        let q = qf(&m).unwrap();
        let r = q.t().dot(&m);
        for i in 0..n {
            prop_assert!(r[[i, i]] > 0.0);
            for j in 0..i {
                prop_assert!(r[[i, j]].abs() < 1e-10);
            }
        }
    }
}

#[test]
fn zero_step_retraction_is_identity() {
    let w = orthogonal_init(5, 5, 4).unwrap();
    let w2 = riemannian_step(&w, &Array2::zeros((5, 5)), 0.3).unwrap();
    assert!(max_abs(&(w2.as_array() - w.as_array())) < 1e-14);
}

#[test]
fn qf_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = gaussian(&mut rng, 6, 6);
    let a = qf(&m).unwrap();
    let b = qf(&m).unwrap();
    assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn rank_deficient_input_is_rejected() {
    let m = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 2.0, 4.0]).unwrap();
    assert!(matches!(qf(&m), Err(OptimError::RankDeficient(_))));
}

#[test]
fn stiefel_constructor_checks_orthonormality() {
    assert!(StiefelMatrix::new(Array2::from_elem((2, 2), 1.0)).is_err());
    assert!(StiefelMatrix::new(Array2::eye(3)).is_ok());
}

#[test]
fn apply_step_keeps_stiefel_params_on_manifold() {
    let mut ps = ParamSet::new();
    let w = ps.add("w", ParamKind::Stiefel, orthogonal_init(4, 4, 1).unwrap().into_inner());
    let b = ps.add("b", ParamKind::Euclidean, Array2::zeros((1, 4)));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for rule in [EuclideanRule::Sgd, EuclideanRule::Adam] {
        let mut state = OptState::new(&ps, 0.05, 0.05, rule).unwrap();
        for _ in 0..500 {
            // d/dθ <θ, G> = G
            let mut tape = Tape::new();
            let v = tape.load_params(&ps);
            let gw = tape.constant(gaussian(&mut rng, 4, 4));
            let gb = tape.constant(gaussian(&mut rng, 1, 4));
            let lw = tape.dot(v[w.0], gw).unwrap();
            let lb = tape.dot(v[b.0], gb).unwrap();
            let loss = tape.add(lw, lb).unwrap();
            let g = tape.backward(loss).unwrap();
            apply_step(&mut ps, &g, &mut state).unwrap();
        }
        assert!(orthonormality_error(ps.value(w)) < STIEFEL_TOL);
    }
}
