//! Parameter updates.
//!
//! Orthogonal transformation sub-matrices live on the Stiefel manifold
//! `St(n', n) = { M : M^T M = I }` and are updated with Riemannian SGD: the
//! Euclidean gradient is projected onto the tangent space at `W`, scaled by
//! the learning rate, and retracted back with the Q factor of a QR
//! decomposition. Everything else gets a plain first-order update.

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Grads, ParamKind, ParamSet, Tensor};

/// Allowed `max |M^T M - I|` for Stiefel membership.
pub const STIEFEL_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("matrix is rank deficient (|R_ii| = {0:e})")]
    RankDeficient(f64),
    #[error("not on the Stiefel manifold: max |M^T M - I| = {0:e}")]
    NotStiefel(f64),
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, OptimError>;

/// A matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelMatrix(Tensor);

impl StiefelMatrix {
    /// Checks `max |M^T M - I| < STIEFEL_TOL`.
    pub fn new(m: Tensor) -> Result<Self> {
        if m.nrows() < m.ncols() {
            return Err(OptimError::Shape(format!("{:?} has more columns than rows", m.dim())));
        }
        let err = orthonormality_error(&m);
        if !(err < STIEFEL_TOL) {
            return Err(OptimError::NotStiefel(err));
        }
        Ok(Self(m))
    }

    pub fn identity(n: usize) -> Self {
        Self(Array2::eye(n))
    }

    pub fn as_array(&self) -> &Tensor {
        &self.0
    }

    pub fn into_inner(self) -> Tensor {
        self.0
    }

    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(&self.0)
    }
}

/// `max |M^T M - I|`.
pub fn orthonormality_error(m: &Tensor) -> f64 {
    let gram = m.t().dot(m);
    gram.indexed_iter()
        .map(|((i, j), v)| (v - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max)
}

/// Riemannian gradient `G - W (W^T G + G^T W) / 2`.
pub fn tangent_project(w: &StiefelMatrix, g: &Tensor) -> Result<Tensor> {
    let w = &w.0;
    if w.dim() != g.dim() {
        return Err(OptimError::Shape(format!("W {:?} vs G {:?}", w.dim(), g.dim())));
    }
    let wtg = w.t().dot(g);
    let sym = &wtg + &wtg.t();
    Ok(g - &(w.dot(&sym) * 0.5))
}

/// Q factor of a thin QR decomposition with the diagonal of R forced
/// positive, which makes the factor unique.
pub fn qf(m: &Tensor) -> Result<Tensor> {
    let (rows, cols) = m.dim();
    if rows < cols {
        return Err(OptimError::Shape(format!("{:?} has more columns than rows", m.dim())));
    }
    let dm = DMatrix::from_fn(rows, cols, |i, j| m[[i, j]]);
    let qr = dm.qr();
    let (q, r) = (qr.q(), qr.r());
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let mut out = Array2::zeros((rows, cols));
    for j in 0..cols {
        let rjj = r[(j, j)];
        if !(rjj.abs() > 1e-12 * scale) {
            return Err(OptimError::RankDeficient(rjj.abs()));
        }
        let sign = rjj.signum();
        for i in 0..rows {
            out[[i, j]] = sign * q[(i, j)];
        }
    }
    Ok(out)
}

/// QR retraction `qf(W - P)`.
pub fn qr_retract(w: &StiefelMatrix, step: &Tensor) -> Result<StiefelMatrix> {
    if w.0.dim() != step.dim() {
        return Err(OptimError::Shape(format!("W {:?} vs P {:?}", w.0.dim(), step.dim())));
    }
    Ok(StiefelMatrix(qf(&(&w.0 - step))?))
}

/// One Riemannian SGD step: `qf(W - lr * proj_W(G))`.
pub fn riemannian_step(w: &StiefelMatrix, g: &Tensor, lr: f64) -> Result<StiefelMatrix> {
    let p = tangent_project(w, g)? * lr;
    qr_retract(w, &p)
}

/// Q factor of a seeded standard-Gaussian `rows x cols` matrix.
pub fn orthogonal_init(rows: usize, cols: usize, seed: u64) -> Result<StiefelMatrix> {
    if cols > rows {
        return Err(OptimError::Config(format!(
            "cannot fit {cols} orthonormal columns in {rows} dimensions"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng));
    Ok(StiefelMatrix(qf(&g)?))
}

/// First-order rule for unconstrained parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EuclideanRule {
    #[default]
    Sgd,
    Adam,
}

/// Learning rates plus per-parameter accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub lr_riemannian: f64,
    pub lr_euclidean: f64,
    pub rule: EuclideanRule,
    pub step: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptState {
    pub fn new(params: &ParamSet, lr_riemannian: f64, lr_euclidean: f64, rule: EuclideanRule) -> Result<Self> {
        // Zero rates are allowed (frozen training); negative ones are not.
        if !(lr_riemannian >= 0.0) || !(lr_euclidean >= 0.0) {
            return Err(OptimError::Config(format!(
                "learning rates must be non-negative, got {lr_riemannian} / {lr_euclidean}"
            )));
        }
        let zeros: Vec<Tensor> = params.iter().map(|(_, p)| Array2::zeros(p.value.raw_dim())).collect();
        Ok(Self {
            lr_riemannian,
            lr_euclidean,
            rule,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        })
    }
}

/// Plain SGD or Adam on one array.
pub fn euclidean_step(value: &mut Tensor, grad: &Tensor, state: &mut OptState, slot: usize) -> Result<()> {
    if value.dim() != grad.dim() {
        return Err(OptimError::Shape(format!(
            "param {:?} vs grad {:?}",
            value.dim(),
            grad.dim()
        )));
    }
    let lr = state.lr_euclidean;
    match state.rule {
        EuclideanRule::Sgd => value.scaled_add(-lr, grad),
        EuclideanRule::Adam => {
            let t = (state.step + 1) as i32;
            let m = &mut state.first_moment[slot];
            let v = &mut state.second_moment[slot];
            let c1 = 1.0 - ADAM_BETA1.powi(t);
            let c2 = 1.0 - ADAM_BETA2.powi(t);
            ndarray::Zip::from(value)
                .and(grad)
                .and(m)
                .and(v)
                .for_each(|x, &g, m, v| {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *x -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                });
        }
    }
    Ok(())
}

/// Applies one update to every parameter: Riemannian SGD for Stiefel
/// parameters, the configured first-order rule for the rest.
pub fn apply_step(params: &mut ParamSet, grads: &Grads, state: &mut OptState) -> Result<()> {
    if grads.len() != params.len() {
        return Err(OptimError::Shape(format!(
            "{} grads for {} params",
            grads.len(),
            params.len()
        )));
    }
    let lr_r = state.lr_riemannian;
    for (id, p) in params.iter_mut() {
        let g = grads.get(id);
        match p.kind {
            ParamKind::Stiefel => {
                if lr_r == 0.0 {
                    continue;
                }
                let w = StiefelMatrix(std::mem::take(&mut p.value));
                p.value = riemannian_step(&w, g, lr_r)?.into_inner();
            }
            ParamKind::Euclidean => {
                if state.lr_euclidean == 0.0 {
                    continue;
                }
                euclidean_step(&mut p.value, g, state, id.0)?;
            }
        }
    }
    state.step += 1;
    Ok(())
}
