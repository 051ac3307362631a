use approx::assert_abs_diff_eq;
use hhgcn::geometry::*;
use hhgcn::model::lorentz_linear;
use hhgcn::optimizer::{orthogonal_init, StiefelMatrix};
use proptest::prelude::*;

fn tangent_at_origin(max_norm: f64, dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, dim).prop_map(move |mut z| {
        let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > max_norm {
            z.iter_mut().for_each(|v| *v *= max_norm / n);
        }
        z
    })
}

/// Points `exp_o(z)` with `|z| <= r`.
fn point(dim: usize, r: f64) -> impl Strategy<Value = LorentzPoint> {
    tangent_at_origin(r, dim).prop_map(|z| exp_origin(&z))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn on_manifold(x: &LorentzPoint) -> bool {
    x.residual().abs() < 1e-9 * x.time().powi(2).max(1.0) && x.time() > 0.0
}

/// `B(t) ⊕ I`: a boost mixing the time axis with the first spatial axis.
fn boost(x: &[f64], t: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    y[0] = t.cosh() * x[0] + t.sinh() * x[1];
    y[1] = t.sinh() * x[0] + t.cosh() * x[1];
    y
}

fn klein_midpoint_of(points: &[LorentzPoint]) -> LorentzPoint {
    let k: Vec<_> = points.iter().map(lorentz_to_klein).collect();
    klein_to_lorentz(&einstein_midpoint(&k).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn exp_maps_land_on_the_manifold(x in point(4, 2.0), v in prop::collection::vec(-2.0..2.0f64, 5)) {
        let t = TangentVector::project(&x, &v).unwrap();
        let y = exp_map(&x, &t).unwrap();
        prop_assert!(on_manifold(&y), "residual {}", y.residual());
        prop_assert!(on_manifold(&exp_origin(&v[..4])));
    }

    #[test]
    fn log_inverts_exp(x in point(3, 1.5), v in prop::collection::vec(-3.0..3.0f64, 4)) {
        let mut t = TangentVector::project(&x, &v).unwrap();
        if t.norm() > 5.0 {
            let s = 5.0 / t.norm();
            t = TangentVector::project(&x, &t.coords().iter().map(|c| c * s).collect::<Vec<_>>()).unwrap();
        }
        let back = log_map(&x, &exp_map(&x, &t).unwrap()).unwrap();
        prop_assert!(max_abs_diff(back.coords(), t.coords()) < 1e-8,
            "{:?} vs {:?}", back.coords(), t.coords());
    }

    #[test]
    fn geodesics_have_unit_speed(x in point(3, 1.5), v in prop::collection::vec(-2.0..2.0f64, 4)) {
        let t = TangentVector::project(&x, &v).unwrap();
        let y = exp_map(&x, &t).unwrap();
        prop_assert!((lorentz_distance(&x, &y).unwrap() - t.norm()).abs() < 1e-9);
    }

    #[test]
    fn distance_is_a_metric(x in point(3, 2.0), y in point(3, 2.0), z in point(3, 2.0)) {
        let dxy = lorentz_distance(&x, &y).unwrap();
        prop_assert_eq!(dxy, lorentz_distance(&y, &x).unwrap());
        prop_assert!(dxy >= 0.0);
        prop_assert_eq!(lorentz_distance(&x, &x).unwrap(), 0.0);
        let dxz = lorentz_distance(&x, &z).unwrap();
        let dzy = lorentz_distance(&z, &y).unwrap();
        prop_assert!(dxy <= dxz + dzy + 1e-9);
    }

    #[test]
    fn ball_bijections_round_trip(x in point(5, 3.6)) {
        // |z| <= 3.6 keeps x0 = cosh|z| <= 20
        let p = poincare_to_lorentz(&lorentz_to_poincare(&x));
        let k = klein_to_lorentz(&lorentz_to_klein(&x));
        let scale = x.time();
        prop_assert!(max_abs_diff(p.coords(), x.coords()) / scale < 1e-12);
        prop_assert!(max_abs_diff(k.coords(), x.coords()) / scale < 1e-12);
        prop_assert!(lorentz_to_poincare(&x).norm() < 1.0);
        prop_assert!(lorentz_to_klein(&x).norm() < 1.0);
    }

    #[test]
    fn einstein_midpoint_matches_normalized_sum(pts in prop::collection::vec(point(4, 2.0), 1..=50)) {
        let a = klein_midpoint_of(&pts);
        let b = lorentz_midpoint(&pts).unwrap();
        prop_assert!(max_abs_diff(a.coords(), b.coords()) < 1e-10);
        prop_assert!(on_manifold(&a));
    }

    #[test]
    fn midpoint_commutes_with_rotations(pts in prop::collection::vec(point(4, 2.0), 1..=20), seed in any::<u64>()) {
        let w = orthogonal_init(4, 4, seed).unwrap();
        let rotated: Vec<_> = pts.iter().map(|p| lorentz_linear(p, &w).unwrap()).collect();
        let lhs = klein_midpoint_of(&rotated);
        let rhs = lorentz_linear(&klein_midpoint_of(&pts), &w).unwrap();
        prop_assert!(max_abs_diff(lhs.coords(), rhs.coords()) < 1e-10);
    }

    #[test]
    fn midpoint_commutes_with_boosts(pts in prop::collection::vec(point(3, 1.5), 1..=20), t in -2.0..2.0f64) {
        let boosted: Vec<_> = pts
            .iter()
            .map(|p| LorentzPoint::new(boost(p.coords(), t)).unwrap())
            .collect();
        let lhs = klein_midpoint_of(&boosted);
        let rhs = boost(klein_midpoint_of(&pts).coords(), t);
        prop_assert!(max_abs_diff(lhs.coords(), &rhs) < 1e-9);
    }

    #[test]
    fn lorentz_linear_is_an_isometry(x in point(4, 2.0), y in point(4, 2.0), seed in any::<u64>()) {
        let w = orthogonal_init(4, 4, seed).unwrap();
        let (wx, wy) = (lorentz_linear(&x, &w).unwrap(), lorentz_linear(&y, &w).unwrap());
        let before = lorentz_distance(&x, &y).unwrap();
        prop_assert!((lorentz_distance(&wx, &wy).unwrap() - before).abs() < 1e-9);
        prop_assert_eq!(wx.time().to_bits(), x.time().to_bits());
        prop_assert!(on_manifold(&wx));
    }

    #[test]
    fn projection_repairs_drift(x in point(3, 2.0), noise in prop::collection::vec(-1e-3..1e-3f64, 3)) {
        let mut raw = x.coords().to_vec();
        for (c, n) in raw[1..].iter_mut().zip(&noise) {
            *c += n;
        }
        let fixed = project_to_lorentz(&raw).unwrap();
        prop_assert!(on_manifold(&fixed));
        prop_assert_eq!(&fixed.coords()[1..], &raw[1..]);
    }
}

#[test]
fn reference_distances() {
    // arcosh(2), and d(o, exp_o(z)) = |z|
    let x = LorentzPoint::new(vec![2f64.sqrt(), 1.0, 0.0]).unwrap();
    let y = LorentzPoint::new(vec![2f64.sqrt(), 0.0, 1.0]).unwrap();
    assert_abs_diff_eq!(lorentz_distance(&x, &y).unwrap(), 1.3169578969248166, epsilon = 1e-12);
    let o = LorentzPoint::origin(3);
    for r in [1e-6, 0.1, 1.0, 5.0, 15.0] {
        let p = exp_origin(&[r, 0.0, 0.0]);
        assert_abs_diff_eq!(lorentz_distance(&o, &p).unwrap(), r, epsilon = 1e-9 * r.max(1.0));
    }
}

#[test]
fn identity_rotation_is_identity() {
    let x = exp_origin(&[0.3, -0.7, 1.1]);
    assert_eq!(lorentz_linear(&x, &StiefelMatrix::identity(3)).unwrap(), x);
}
