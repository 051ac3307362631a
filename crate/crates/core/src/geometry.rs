//! Hyperbolic geometry on the Lorentz hyperboloid, the Klein model and the
//! Poincaré ball (curvature -1).
//!
//! Points on the hyperboloid satisfy `<x, x>_L = -1` with `x[0] > 0`, where
//! `<x, y>_L = -x0*y0 + sum_i xi*yi`. The Klein and Poincaré models live in
//! the open unit ball; the bijections between the three models are exact
//! and norms are clamped below 1 so that Lorentz factors stay finite.
//!
//! Everything here is a pure function over `f64` slices or owned newtypes.

use thiserror::Error;

/// Residual allowed on `<x, x>_L + 1` for a valid Lorentz point.
pub const MANIFOLD_TOL: f64 = 1e-9;
/// Ball coordinates are clamped to norm `1 - BALL_EPS`.
pub const BALL_EPS: f64 = 1e-12;
/// Tangent vectors shorter than this are treated as zero by `exp_map`.
pub const EXP_ZERO_THRESHOLD: f64 = 1e-12;
/// Allowed `|<x, v>_L|` for a tangent vector at `x`.
pub const TANGENT_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("ambient dimension must be at least 2, got {0}")]
    TooSmall(usize),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("point is off the hyperboloid (residual {residual:e})")]
    OffManifold { residual: f64 },
    #[error("vector is not tangent at the base point (<x, v>_L = {inner:e})")]
    NotTangent { inner: f64 },
    #[error("empty point set")]
    Empty,
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Minkowski inner product without length checks.
#[inline]
pub fn minkowski(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let spatial: f64 = x[1..].iter().zip(&y[1..]).map(|(a, b)| a * b).sum();
    spatial - x[0] * y[0]
}

/// `<x, y>_L = -x0*y0 + sum_i xi*yi`.
pub fn lorentz_inner(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(GeometryError::DimensionMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(GeometryError::TooSmall(x.len()));
    }
    Ok(minkowski(x, y))
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|a| a.is_finite()) {
        Ok(())
    } else {
        Err(GeometryError::Domain(format!("{what} has non-finite coordinates")))
    }
}

/// `arcosh(max(u, 1))`.
#[inline]
pub fn arcosh_clamped(u: f64) -> f64 {
    u.max(1.0).acosh()
}

/// A point on the n-dimensional hyperboloid, stored with n+1 coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LorentzPoint {
    coords: Vec<f64>,
}

impl LorentzPoint {
    /// Validates the manifold invariant; use [`project_to_lorentz`] to repair drift.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(GeometryError::TooSmall(coords.len()));
        }
        check_finite(&coords, "Lorentz point")?;
        let residual = minkowski(&coords, &coords) + 1.0;
        if residual.abs() > MANIFOLD_TOL * coords[0].abs().max(1.0).powi(2) || coords[0] <= 0.0 {
            return Err(GeometryError::OffManifold { residual });
        }
        Ok(Self { coords })
    }

    /// Wraps coordinates that are known to be on the manifold.
    pub(crate) fn from_raw(coords: Vec<f64>) -> Self {
        Self { coords }
    }

    /// The origin `o = [1, 0, ..., 0]` of the n-dimensional model.
    pub fn origin(dim: usize) -> Self {
        let mut coords = vec![0.0; dim + 1];
        coords[0] = 1.0;
        Self { coords }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    /// Manifold dimension n.
    pub fn dim(&self) -> usize {
        self.coords.len() - 1
    }

    pub fn time(&self) -> f64 {
        self.coords[0]
    }

    pub fn spatial(&self) -> &[f64] {
        &self.coords[1..]
    }

    /// `<x, x>_L + 1`.
    pub fn residual(&self) -> f64 {
        minkowski(&self.coords, &self.coords) + 1.0
    }

    pub fn distance(&self, other: &LorentzPoint) -> Result<f64> {
        lorentz_distance(self, other)
    }
}

/// A point of the Klein model.
#[derive(Debug, Clone, PartialEq)]
pub struct KleinPoint {
    coords: Vec<f64>,
}

/// A point of the Poincaré ball.
#[derive(Debug, Clone, PartialEq)]
pub struct PoincarePoint {
    coords: Vec<f64>,
}

/// Rescales `v` in place so that its norm is at most `1 - BALL_EPS`.
fn clamp_into_ball(v: &mut [f64]) {
    let norm = norm_sq(v).sqrt();
    let max = 1.0 - BALL_EPS;
    if norm > max {
        let s = max / norm;
        v.iter_mut().for_each(|a| *a *= s);
    }
}

fn ball_coords(coords: Vec<f64>, model: &str) -> Result<Vec<f64>> {
    if coords.is_empty() {
        return Err(GeometryError::TooSmall(0));
    }
    check_finite(&coords, model)?;
    let mut coords = coords;
    let norm = norm_sq(&coords).sqrt();
    if norm >= 1.0 {
        return Err(GeometryError::Domain(format!("{model} point has norm {norm} >= 1")));
    }
    clamp_into_ball(&mut coords);
    Ok(coords)
}

impl KleinPoint {
    /// Rejects norms >= 1; norms in `[1 - BALL_EPS, 1)` are clamped.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        Ok(Self {
            coords: ball_coords(coords, "Klein")?,
        })
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn norm(&self) -> f64 {
        norm_sq(&self.coords).sqrt()
    }
}

impl PoincarePoint {
    /// Rejects norms >= 1; norms in `[1 - BALL_EPS, 1)` are clamped.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        Ok(Self {
            coords: ball_coords(coords, "Poincaré")?,
        })
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn norm(&self) -> f64 {
        norm_sq(&self.coords).sqrt()
    }
}

/// A vector in the tangent space at `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    base: LorentzPoint,
    coords: Vec<f64>,
}

impl TangentVector {
    pub fn new(base: &LorentzPoint, coords: Vec<f64>) -> Result<Self> {
        if coords.len() != base.coords.len() {
            return Err(GeometryError::DimensionMismatch {
                left: base.coords.len(),
                right: coords.len(),
            });
        }
        check_finite(&coords, "tangent vector")?;
        let inner = minkowski(&base.coords, &coords);
        if inner.abs() > TANGENT_TOL {
            return Err(GeometryError::NotTangent { inner });
        }
        Ok(Self {
            base: base.clone(),
            coords,
        })
    }

    pub fn zero(base: &LorentzPoint) -> Self {
        Self {
            base: base.clone(),
            coords: vec![0.0; base.coords.len()],
        }
    }

    /// Projects an arbitrary ambient vector onto the tangent space at `base`:
    /// `u + <x, u>_L x`.
    pub fn project(base: &LorentzPoint, ambient: &[f64]) -> Result<Self> {
        if ambient.len() != base.coords.len() {
            return Err(GeometryError::DimensionMismatch {
                left: base.coords.len(),
                right: ambient.len(),
            });
        }
        let inner = minkowski(&base.coords, ambient);
        let coords = ambient.iter().zip(&base.coords).map(|(u, x)| u + inner * x).collect();
        Ok(Self {
            base: base.clone(),
            coords,
        })
    }

    pub fn base(&self) -> &LorentzPoint {
        &self.base
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// `sqrt(max(<v, v>_L, 0))`.
    pub fn norm(&self) -> f64 {
        minkowski(&self.coords, &self.coords).max(0.0).sqrt()
    }
}

/// Geodesic distance `arcosh(-<x, y>_L)`, with the argument clamped to >= 1.
pub fn lorentz_distance(x: &LorentzPoint, y: &LorentzPoint) -> Result<f64> {
    let u = -lorentz_inner(&x.coords, &y.coords)?;
    if u.is_nan() {
        return Err(GeometryError::Domain("NaN inner product".into()));
    }
    if u < 2.0 {
        // cosh d = 1 + |x - y|_L^2 / 2; the difference form keeps d(x, x) = 0
        // exactly where arcosh(1 + rounding) would not.
        let diff: Vec<f64> = x.coords.iter().zip(&y.coords).map(|(a, b)| a - b).collect();
        let sq = minkowski(&diff, &diff).max(0.0);
        return Ok(2.0 * (sq.sqrt() / 2.0).asinh());
    }
    Ok(arcosh_clamped(u))
}

/// `cosh(|v|) x + sinh(|v|) v / |v|`.
pub fn exp_map(x: &LorentzPoint, v: &TangentVector) -> Result<LorentzPoint> {
    if v.coords.len() != x.coords.len() {
        return Err(GeometryError::DimensionMismatch {
            left: x.coords.len(),
            right: v.coords.len(),
        });
    }
    let inner = minkowski(&x.coords, &v.coords);
    if inner.abs() > TANGENT_TOL {
        return Err(GeometryError::NotTangent { inner });
    }
    let r = v.norm();
    if r < EXP_ZERO_THRESHOLD {
        return Ok(x.clone());
    }
    let (c, s) = (r.cosh(), r.sinh() / r);
    let coords = x.coords.iter().zip(&v.coords).map(|(a, b)| c * a + s * b).collect();
    Ok(LorentzPoint { coords })
}

/// Inverse of [`exp_map`]; coincident points give the zero vector.
pub fn log_map(x: &LorentzPoint, y: &LorentzPoint) -> Result<TangentVector> {
    let inner = lorentz_inner(&x.coords, &y.coords)?;
    if inner.is_nan() {
        return Err(GeometryError::Domain("NaN inner product".into()));
    }
    let u = -inner;
    if u < 1.0 + 1e-12 {
        return Ok(TangentVector::zero(x));
    }
    let scale = u.acosh() / (u * u - 1.0).sqrt();
    let coords = y
        .coords
        .iter()
        .zip(&x.coords)
        .map(|(b, a)| scale * (b + inner * a))
        .collect();
    Ok(TangentVector {
        base: x.clone(),
        coords,
    })
}

/// Exponential map at the origin for a spatial tangent vector `[0, z]`.
pub fn exp_origin(z: &[f64]) -> LorentzPoint {
    let r = norm_sq(z).sqrt();
    let mut coords = Vec::with_capacity(z.len() + 1);
    if r < EXP_ZERO_THRESHOLD {
        coords.push(1.0);
        coords.extend(std::iter::repeat_n(0.0, z.len()));
    } else {
        let s = r.sinh() / r;
        coords.push(r.cosh());
        coords.extend(z.iter().map(|a| s * a));
    }
    LorentzPoint { coords }
}

/// `x_{1:n} / (x0 + 1)`.
pub fn lorentz_to_poincare(x: &LorentzPoint) -> PoincarePoint {
    let d = x.coords[0] + 1.0;
    let mut coords: Vec<f64> = x.coords[1..].iter().map(|a| a / d).collect();
    clamp_into_ball(&mut coords);
    PoincarePoint { coords }
}

/// `[1 + |b|^2, 2b] / (1 - |b|^2)`.
pub fn poincare_to_lorentz(b: &PoincarePoint) -> LorentzPoint {
    let u = norm_sq(&b.coords);
    let den = 1.0 - u;
    let mut coords = Vec::with_capacity(b.coords.len() + 1);
    coords.push((1.0 + u) / den);
    coords.extend(b.coords.iter().map(|a| 2.0 * a / den));
    LorentzPoint { coords }
}

/// `x_{1:n} / x0`.
pub fn lorentz_to_klein(x: &LorentzPoint) -> KleinPoint {
    let mut coords: Vec<f64> = x.coords[1..].iter().map(|a| a / x.coords[0]).collect();
    clamp_into_ball(&mut coords);
    KleinPoint { coords }
}

/// `gamma(k) [1, k]`.
pub fn klein_to_lorentz(k: &KleinPoint) -> LorentzPoint {
    let g = lorentz_factor(k);
    let mut coords = Vec::with_capacity(k.coords.len() + 1);
    coords.push(g);
    coords.extend(k.coords.iter().map(|a| g * a));
    LorentzPoint { coords }
}

/// `1 / sqrt(1 - |k|^2)`. For `k = lorentz_to_klein(x)` this equals `x0`.
pub fn lorentz_factor(k: &KleinPoint) -> f64 {
    1.0 / (1.0 - norm_sq(&k.coords)).sqrt()
}

/// Einstein midpoint in the Klein model: `sum gamma_j k_j / sum gamma_j`.
pub fn einstein_midpoint(points: &[KleinPoint]) -> Result<KleinPoint> {
    let first = points.first().ok_or(GeometryError::Empty)?;
    let n = first.coords.len();
    let mut num = vec![0.0; n];
    let mut den = 0.0;
    for k in points {
        if k.coords.len() != n {
            return Err(GeometryError::DimensionMismatch {
                left: n,
                right: k.coords.len(),
            });
        }
        let g = lorentz_factor(k);
        den += g;
        num.iter_mut().zip(&k.coords).for_each(|(a, b)| *a += g * b);
    }
    num.iter_mut().for_each(|a| *a /= den);
    clamp_into_ball(&mut num);
    Ok(KleinPoint { coords: num })
}

/// Einstein midpoint computed directly on the hyperboloid as the coordinate
/// sum normalized back onto the manifold, `s / sqrt(-<s, s>_L)`.
pub fn lorentz_midpoint(points: &[LorentzPoint]) -> Result<LorentzPoint> {
    let first = points.first().ok_or(GeometryError::Empty)?;
    let mut sum = vec![0.0; first.coords.len()];
    for x in points {
        if x.coords.len() != sum.len() {
            return Err(GeometryError::DimensionMismatch {
                left: sum.len(),
                right: x.coords.len(),
            });
        }
        sum.iter_mut().zip(&x.coords).for_each(|(a, b)| *a += b);
    }
    let q = -minkowski(&sum, &sum);
    if !(q > 0.0) {
        return Err(GeometryError::Domain("coordinate sum is not time-like".into()));
    }
    let s = q.sqrt();
    sum.iter_mut().for_each(|a| *a /= s);
    Ok(LorentzPoint { coords: sum })
}

/// Recomputes the time coordinate from the spatial part,
/// `x0 = sqrt(1 + |x_{1:n}|^2)`.
pub fn project_to_lorentz(raw: &[f64]) -> Result<LorentzPoint> {
    if raw.len() < 2 {
        return Err(GeometryError::TooSmall(raw.len()));
    }
    check_finite(raw, "raw point")?;
    let mut coords = raw.to_vec();
    coords[0] = (1.0 + norm_sq(&raw[1..])).sqrt();
    Ok(LorentzPoint { coords })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sqrt2() -> f64 {
        2f64.sqrt()
    }

    #[test]
    fn inner_product_examples() {
        let o = [1.0, 0.0, 0.0];
        assert_eq!(lorentz_inner(&o, &o).unwrap(), -1.0);
        let x = [sqrt2(), 1.0, 0.0];
        let y = [sqrt2(), 0.0, 1.0];
        assert_abs_diff_eq!(lorentz_inner(&x, &y).unwrap(), -2.0, epsilon = 1e-15);
        assert_eq!(lorentz_inner(&o, &[0.0, 3.5, -2.0]).unwrap(), 0.0);
        assert!(matches!(
            lorentz_inner(&o, &[1.0, 0.0]),
            Err(GeometryError::DimensionMismatch { .. })
        ));
        assert!(matches!(lorentz_inner(&[1.0], &[1.0]), Err(GeometryError::TooSmall(1))));
    }

    #[test]
    fn distance_examples() {
        let x = LorentzPoint::new(vec![sqrt2(), 1.0, 0.0]).unwrap();
        let y = LorentzPoint::new(vec![sqrt2(), 0.0, 1.0]).unwrap();
        assert_eq!(lorentz_distance(&x, &x).unwrap(), 0.0);
        assert_abs_diff_eq!(lorentz_distance(&x, &y).unwrap(), 1.3169578969248166, epsilon = 1e-12);
        assert_eq!(lorentz_distance(&x, &y).unwrap(), lorentz_distance(&y, &x).unwrap());
    }

    #[test]
    fn nan_distance_is_domain_error() {
        let x = LorentzPoint::from_raw(vec![f64::NAN, 0.0]);
        let o = LorentzPoint::origin(1);
        assert!(matches!(lorentz_distance(&x, &o), Err(GeometryError::Domain(_))));
    }

    #[test]
    fn exp_and_log_at_origin() {
        let o = LorentzPoint::origin(2);
        assert_eq!(exp_map(&o, &TangentVector::zero(&o)).unwrap(), o);
        let v = TangentVector::new(&o, vec![0.0, 1.0, 0.0]).unwrap();
        let p = exp_map(&o, &v).unwrap();
        assert_abs_diff_eq!(p.coords()[0], 1.5430806348152437, epsilon = 1e-14);
        assert_abs_diff_eq!(p.coords()[1], 1.1752011936438014, epsilon = 1e-14);
        assert_eq!(p.coords()[2], 0.0);

        let back = log_map(&o, &p).unwrap();
        for (a, b) in back.coords().iter().zip([0.0, 1.0, 0.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        let zero = log_map(&p, &p).unwrap();
        assert!(zero.coords().iter().all(|a| *a == 0.0));
    }

    #[test]
    fn exp_rejects_non_tangent() {
        let o = LorentzPoint::origin(2);
        assert!(TangentVector::new(&o, vec![0.5, 1.0, 0.0]).is_err());
        let bogus = TangentVector {
            base: o.clone(),
            coords: vec![0.5, 1.0, 0.0],
        };
        assert!(matches!(exp_map(&o, &bogus), Err(GeometryError::NotTangent { .. })));
    }

    #[test]
    fn poincare_and_klein_examples() {
        let o = LorentzPoint::origin(1);
        assert_eq!(lorentz_to_poincare(&o).coords(), &[0.0]);
        assert_eq!(poincare_to_lorentz(&PoincarePoint::new(vec![0.0]).unwrap()), o);
        assert_eq!(lorentz_to_klein(&o).coords(), &[0.0]);
        assert_eq!(klein_to_lorentz(&KleinPoint::new(vec![0.0]).unwrap()), o);

        let x = LorentzPoint::new(vec![1f64.cosh(), 1f64.sinh()]).unwrap();
        assert_abs_diff_eq!(
            lorentz_to_poincare(&x).coords()[0],
            0.46211715726000974,
            epsilon = 1e-15
        );
        let k = lorentz_to_klein(&x);
        assert_abs_diff_eq!(k.coords()[0], 0.7615941559557649, epsilon = 1e-15);
        assert_abs_diff_eq!(lorentz_factor(&k), 1.5430806348152437, epsilon = 1e-13);
    }

    #[test]
    fn ball_constructors_reject_boundary() {
        assert!(PoincarePoint::new(vec![1.0, 0.0]).is_err());
        assert!(KleinPoint::new(vec![0.6, 0.8]).is_err());
        assert!(KleinPoint::new(vec![f64::NAN]).is_err());
        let k = KleinPoint::new(vec![1.0 - 1e-14]).unwrap();
        assert!(k.norm() <= 1.0 - BALL_EPS);
    }

    #[test]
    fn lorentz_factor_basics() {
        assert_eq!(lorentz_factor(&KleinPoint::new(vec![0.0, 0.0]).unwrap()), 1.0);
        let mut prev = 1.0;
        for i in 1..100 {
            let g = lorentz_factor(&KleinPoint::new(vec![i as f64 / 100.0]).unwrap());
            assert!(g > prev);
            prev = g;
        }
    }

    #[test]
    fn midpoint_examples() {
        let k = KleinPoint::new(vec![0.3, -0.4]).unwrap();
        assert_eq!(einstein_midpoint(std::slice::from_ref(&k)).unwrap(), k);
        let neg = KleinPoint::new(vec![-0.3, 0.4]).unwrap();
        let m = einstein_midpoint(&[k, neg]).unwrap();
        assert!(m.coords().iter().all(|a| a.abs() < 1e-16));
        assert_eq!(einstein_midpoint(&[]), Err(GeometryError::Empty));

        let x = LorentzPoint::new(vec![sqrt2(), 1.0, 0.0]).unwrap();
        let y = LorentzPoint::new(vec![sqrt2(), 0.0, 1.0]).unwrap();
        let mk = einstein_midpoint(&[lorentz_to_klein(&x), lorentz_to_klein(&y)]).unwrap();
        assert_abs_diff_eq!(mk.coords()[0], 0.3535533905932738, epsilon = 1e-15);
        assert_abs_diff_eq!(mk.coords()[1], 0.3535533905932738, epsilon = 1e-15);
        let ml = klein_to_lorentz(&mk);
        let oracle = lorentz_midpoint(&[x, y]).unwrap();
        let expected = [1.1547005383792515, 0.408248290463863, 0.408248290463863];
        for ((a, b), c) in ml.coords().iter().zip(oracle.coords()).zip(expected) {
            assert_abs_diff_eq!(*a, c, epsilon = 1e-12);
            assert_abs_diff_eq!(*b, c, epsilon = 1e-12);
        }
    }

    #[test]
    fn projection_examples() {
        let x = [sqrt2(), 1.0, 0.0];
        let p = project_to_lorentz(&[0.9, 1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(p.coords()[0], sqrt2(), epsilon = 1e-15);
        let same = project_to_lorentz(&x).unwrap();
        for (a, b) in same.coords().iter().zip(x) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert!(project_to_lorentz(&[1.0, f64::INFINITY]).is_err());
        assert!(project_to_lorentz(&[1.0]).is_err());
    }

    #[test]
    fn constructor_checks_invariant() {
        assert!(LorentzPoint::new(vec![1.0, 1.0]).is_err());
        assert!(LorentzPoint::new(vec![-1.0, 0.0]).is_err());
        assert!(LorentzPoint::new(vec![1.0, 0.0]).is_ok());
    }
}
