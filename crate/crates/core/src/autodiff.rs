//! A small reverse-mode differentiation tape over dense `f64` matrices.
//!
//! Every recorded node stores its value, the indices of its inputs and a
//! closure mapping the output adjoint to input adjoints. The primitive set is
//! exactly what the model needs: elementwise maps, matrix products, and
//! fused row-wise hyperbolic operations (exponential map at the origin,
//! Lorentz linear maps, model bijections, midpoints, distances).
//!
//! Gradients are taken in ambient coordinates; manifold constraints are the
//! optimizer's business.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView1, Axis, Zip};
use thiserror::Error;

use crate::geometry::{arcosh_clamped, BALL_EPS, EXP_ZERO_THRESHOLD};
use crate::graphdata::Csr;

pub type Tensor = Array2<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("unsupported primitive `{0}`")]
    UnsupportedOp(String),
    #[error("tape state error: {0}")]
    State(&'static str),
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

fn shape_err(op: &'static str, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::Shape {
        op,
        detail: detail.into(),
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a parameter in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Which optimizer owns a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Euclidean,
    /// Orthonormal columns, updated by Riemannian SGD.
    Stiefel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Ordered registry of named trainable arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            kind,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar coordinates.
    pub fn num_coords(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Euclidean gradients, one array per registered parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    grads: Vec<Tensor>,
}

impl Grads {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            grads: params.params.iter().map(|p| Array2::zeros(p.value.raw_dim())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Elementwise accumulation; shapes must agree.
    pub fn accumulate(&mut self, other: &Grads, weight: f64) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.scaled_add(weight, b);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Elementwise unary maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Neg,
    Square,
    Cosh,
    Sinh,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Softplus,
    /// `arcosh(max(u, 1))`.
    Arcosh,
    /// `arcosh(max(u, 1))^2`, with a derivative that stays finite at `u = 1`.
    ArcoshSq,
}

impl Unary {
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "neg" => Unary::Neg,
            "square" => Unary::Square,
            "cosh" => Unary::Cosh,
            "sinh" => Unary::Sinh,
            "tanh" => Unary::Tanh,
            "exp" => Unary::Exp,
            "log" => Unary::Log,
            "sqrt" => Unary::Sqrt,
            "relu" => Unary::Relu,
            "leaky_relu" => Unary::LeakyRelu(0.01),
            "sigmoid" => Unary::Sigmoid,
            "softplus" => Unary::Softplus,
            "arcosh" => Unary::Arcosh,
            "arcosh_sq" => Unary::ArcoshSq,
            _ => return None,
        })
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Square => x * x,
            Unary::Cosh => x.cosh(),
            Unary::Sinh => x.sinh(),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Arcosh => arcosh_clamped(x),
            Unary::ArcoshSq => arcosh_clamped(x).powi(2),
        }
    }

    /// Derivative given the input `x` and output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Square => 2.0 * x,
            Unary::Cosh => x.sinh(),
            Unary::Sinh => x.cosh(),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Relu => f64::from(x > 0.0),
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Arcosh => arcosh_derivative(x),
            Unary::ArcoshSq => arcosh_sq_derivative(x),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `d/du arcosh(u)`, zero inside the clamped region `u <= 1`.
#[inline]
pub fn arcosh_derivative(u: f64) -> f64 {
    if u - 1.0 < 1e-12 {
        0.0
    } else {
        1.0 / (u * u - 1.0).sqrt()
    }
}

/// `d/du arcosh(u)^2 = 2 arcosh(u) / sqrt(u^2 - 1)`, which tends to 2 as
/// `u -> 1`. Near the singular point the series `2 (1 - (u - 1)/3)` is used;
/// well below 1 (off-manifold inputs) the clamp makes it zero.
#[inline]
pub fn arcosh_sq_derivative(u: f64) -> f64 {
    let eps = u - 1.0;
    if eps < -1e-6 {
        0.0
    } else if eps < 1e-6 {
        2.0 * (1.0 - eps.max(0.0) / 3.0)
    } else {
        2.0 * u.acosh() / (u * u - 1.0).sqrt()
    }
}

#[inline]
fn minkowski_row(x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    let spatial: f64 = x.slice(s![1..]).iter().zip(y.slice(s![1..])).map(|(a, b)| a * b).sum();
    spatial - x[0] * y[0]
}

/// Reverse-mode tape. One forward recording, one backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, usize)>,
    param_count: usize,
    param_shapes: Vec<(usize, usize)>,
    consumed: bool,
    adjoints: Vec<Option<Tensor>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            param_count: 0,
            param_shapes: Vec::new(),
            consumed: false,
            adjoints: Vec::new(),
        }
    }

    /// Registers every parameter of `params` as a leaf; the returned vars are
    /// indexed by `ParamId`.
    pub fn load_params(&mut self, params: &ParamSet) -> Vec<Var> {
        self.param_count = params.len();
        self.param_shapes = params.params.iter().map(|p| p.value.dim()).collect();
        params
            .iter()
            .map(|(id, p)| {
                let v = self.push_leaf(p.value.clone(), true);
                self.params.push((id, v.0));
                v
            })
            .collect()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends a node with a custom local-gradient closure. All inputs must
    /// already be on this tape.
    pub fn record_custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        backward: impl Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor> + 'static,
    ) -> Result<Var> {
        if self.consumed {
            return Err(AutodiffError::State("tape already consumed by backward"));
        }
        if inputs.iter().any(|v| v.0 >= self.nodes.len()) {
            return Err(AutodiffError::State("input is not on this tape"));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: Some(Box::new(backward)),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a named primitive that needs no auxiliary data.
    pub fn record(&mut self, op: &str, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(shape_err(
                    "record",
                    format!("{op} expects {n} inputs, got {}", inputs.len()),
                ))
            }
        };
        if let Some(u) = Unary::from_name(op) {
            arity(1)?;
            return self.unary(inputs[0], u);
        }
        match op {
            "add" | "sub" | "mul" | "div" | "matmul" | "add_row" | "dot" | "lorentz_linear" | "centroid_distance" => {
                arity(2)?
            }
            _ => arity(1)?,
        }
        match op {
            "add" => self.add(inputs[0], inputs[1]),
            "sub" => self.sub(inputs[0], inputs[1]),
            "mul" => self.mul(inputs[0], inputs[1]),
            "div" => self.div(inputs[0], inputs[1]),
            "matmul" => self.matmul(inputs[0], inputs[1]),
            "add_row" => self.add_row(inputs[0], inputs[1]),
            "dot" => self.dot(inputs[0], inputs[1]),
            "lorentz_linear" => self.lorentz_linear(inputs[0], inputs[1]),
            "centroid_distance" => self.centroid_distance(inputs[0], inputs[1]),
            "sum" => self.sum(inputs[0]),
            "mean" => self.mean(inputs[0]),
            "norm2" => self.row_norm(inputs[0]),
            "exp_origin" => self.exp_origin(inputs[0]),
            "lorentz_to_poincare" => self.lorentz_to_poincare(inputs[0]),
            "poincare_to_lorentz" => self.poincare_to_lorentz(inputs[0]),
            "lorentz_to_klein" => self.lorentz_to_klein(inputs[0]),
            "klein_to_lorentz" => self.klein_to_lorentz(inputs[0]),
            "lorentz_normalize" => self.lorentz_normalize(inputs[0]),
            "reproject" => self.reproject(inputs[0]),
            other => Err(AutodiffError::UnsupportedOp(other.to_string())),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adjoint of an arbitrary node after `backward`; `None` for nodes that
    /// do not depend on any parameter.
    pub fn adjoint(&self, v: Var) -> Option<&Tensor> {
        self.adjoints.get(v.0).and_then(|a| a.as_ref())
    }

    /// Reverse accumulation from a 1x1 loss node.
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        if self.consumed {
            return Err(AutodiffError::State("backward already ran on this tape"));
        }
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(AutodiffError::State("backward called before forward"));
        }
        if self.nodes[loss.0].value.dim() != (1, 1) {
            return Err(shape_err(
                "backward",
                format!("loss must be 1x1, got {:?}", self.nodes[loss.0].value.dim()),
            ));
        }
        self.consumed = true;
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = adj[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let input_grads = backward(&g, &inputs, &node.value);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&i, gi) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[i].requires_grad {
                    continue;
                }
                debug_assert_eq!(gi.dim(), self.nodes[i].value.dim());
                match &mut adj[i] {
                    Some(acc) => *acc += &gi,
                    slot @ None => *slot = Some(gi),
                }
            }
            adj[idx] = Some(g);
        }
        let mut grads: Vec<Tensor> = self.param_shapes.iter().map(|&d| Array2::zeros(d)).collect();
        for &(pid, node) in &self.params {
            if let Some(a) = &adj[node] {
                grads[pid.0] += a;
            }
        }
        debug_assert_eq!(grads.len(), self.param_count);
        self.adjoints = adj;
        Ok(Grads { grads })
    }

    // ---- generic primitives -------------------------------------------------

    pub fn unary(&mut self, a: Var, op: Unary) -> Result<Var> {
        let value = self.value(a).mapv(|x| op.apply(x));
        self.record_custom(&[a], value, move |g, ins, out| {
            let mut d = Array2::zeros(g.raw_dim());
            Zip::from(&mut d)
                .and(g)
                .and(ins[0])
                .and(out)
                .for_each(|d, &g, &x, &y| *d = g * op.derivative(x, y));
            vec![d]
        })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (da, db) = (self.value(a).dim(), self.value(b).dim());
        if da != db {
            return Err(shape_err(op, format!("{da:?} vs {db:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a) + self.value(b);
        self.record_custom(&[a, b], value, |g, _, _| vec![g.clone(), g.clone()])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a) - self.value(b);
        self.record_custom(&[a, b], value, |g, _, _| vec![g.clone(), -g])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a) * self.value(b);
        self.record_custom(&[a, b], value, |g, ins, _| vec![g * ins[1], g * ins[0]])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let value = self.value(a) / self.value(b);
        self.record_custom(&[a, b], value, |g, ins, out| vec![g / ins[1], -(g * out) / ins[1]])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a) * factor;
        self.record_custom(&[a], value, move |g, _, _| vec![g * factor])
    }

    pub fn shift(&mut self, a: Var, offset: f64) -> Result<Var> {
        let value = self.value(a) + offset;
        self.record_custom(&[a], value, |g, _, _| vec![g.clone()])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(shape_err("matmul", format!("{:?} x {:?}", va.dim(), vb.dim())));
        }
        let value = va.dot(vb);
        self.record_custom(&[a, b], value, |g, ins, _| vec![g.dot(&ins[1].t()), ins[0].t().dot(g)])
    }

    /// Adds a 1 x c row to every row of an r x c matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(shape_err("add_row", format!("{:?} + {:?}", va.dim(), vr.dim())));
        }
        let value = va + vr;
        self.record_custom(&[a, row], value, |g, _, _| {
            vec![g.clone(), g.sum_axis(Axis(0)).insert_axis(Axis(0))]
        })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.record_custom(&[a], value, |g, ins, _| {
            vec![Array2::from_elem(ins[0].raw_dim(), g[[0, 0]])]
        })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(shape_err("mean", "empty input"));
        }
        let value = Array2::from_elem((1, 1), self.value(a).sum() / n as f64);
        self.record_custom(&[a], value, move |g, ins, _| {
            vec![Array2::from_elem(ins[0].raw_dim(), g[[0, 0]] / n as f64)]
        })
    }

    /// Frobenius inner product of two equally shaped arrays.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let value = Array2::from_elem((1, 1), (self.value(a) * self.value(b)).sum());
        self.record_custom(&[a, b], value, |g, ins, _| {
            let s = g[[0, 0]];
            vec![ins[1] * s, ins[0] * s]
        })
    }

    /// Euclidean norm of every row, as an r x 1 column.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let value = self
            .value(a)
            .map_axis(Axis(1), |r| r.dot(&r).sqrt())
            .insert_axis(Axis(1));
        self.record_custom(&[a], value, |g, ins, out| {
            let mut d = ins[0].clone();
            for ((mut row, n), gi) in d.rows_mut().into_iter().zip(out.iter()).zip(g.iter()) {
                if *n > 0.0 {
                    row *= gi / n;
                } else {
                    row.fill(0.0);
                }
            }
            vec![d]
        })
    }

    /// Mean softmax cross-entropy over the selected rows of `logits`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: Arc<Vec<usize>>,
        rows: Arc<Vec<usize>>,
    ) -> Result<Var> {
        let v = self.value(logits);
        if targets.len() != v.nrows() {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{} targets for {} rows", targets.len(), v.nrows()),
            ));
        }
        if rows.is_empty() {
            return Err(shape_err("softmax_cross_entropy", "no rows selected"));
        }
        let k = v.ncols();
        for &r in rows.iter() {
            if r >= v.nrows() || targets[r] >= k {
                return Err(shape_err(
                    "softmax_cross_entropy",
                    format!("row {r} or its target is out of range"),
                ));
            }
        }
        let mut total = 0.0;
        for &r in rows.iter() {
            let row = v.row(r);
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[targets[r]];
        }
        let n = rows.len() as f64;
        let value = Array2::from_elem((1, 1), total / n);
        self.record_custom(&[logits], value, move |g, ins, _| {
            let x = ins[0];
            let mut d = Array2::zeros(x.raw_dim());
            let s = g[[0, 0]] / n;
            for &r in rows.iter() {
                let row = x.row(r);
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                let mut drow = d.row_mut(r);
                for (j, xv) in row.iter().enumerate() {
                    drow[j] += s * (xv - m).exp() / z;
                }
                drow[targets[r]] -= s;
            }
            vec![d]
        })
    }

    /// Mean binary cross-entropy of an r x 1 column of logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Arc<Vec<f64>>) -> Result<Var> {
        let v = self.value(logits);
        if v.ncols() != 1 || v.nrows() != targets.len() || targets.is_empty() {
            return Err(shape_err(
                "bce_with_logits",
                format!("{:?} logits for {} targets", v.dim(), targets.len()),
            ));
        }
        let n = targets.len() as f64;
        let total: f64 = v.iter().zip(targets.iter()).map(|(&x, &y)| softplus(x) - y * x).sum();
        let value = Array2::from_elem((1, 1), total / n);
        self.record_custom(&[logits], value, move |g, ins, _| {
            let s = g[[0, 0]] / n;
            let mut d = Array2::zeros(ins[0].raw_dim());
            for ((d, &x), &y) in d.iter_mut().zip(ins[0].iter()).zip(targets.iter()) {
                *d = s * (sigmoid(x) - y);
            }
            vec![d]
        })
    }

    /// Fermi-Dirac edge probability `1 / (exp((d2 - r) / t) + 1)` applied to
    /// squared distances.
    pub fn fermi_dirac(&mut self, sq_dist: Var, r: f64, t: f64) -> Result<Var> {
        if !(t > 0.0) {
            return Err(AutodiffError::Domain {
                op: "fermi_dirac",
                detail: format!("temperature must be positive, got {t}"),
            });
        }
        let value = self.value(sq_dist).mapv(|d2| sigmoid((r - d2) / t));
        self.record_custom(&[sq_dist], value, move |g, _, out| {
            vec![g * &out.mapv(|p| -p * (1.0 - p) / t)]
        })
    }

    /// Row means over contiguous segments: `offsets` has one more entry than
    /// there are segments.
    pub fn segment_mean(&mut self, a: Var, offsets: Arc<Vec<usize>>) -> Result<Var> {
        let v = self.value(a);
        if offsets.len() < 2
            || offsets[0] != 0
            || *offsets.last().unwrap() != v.nrows()
            || offsets.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(shape_err(
                "segment_mean",
                "offsets must be strictly increasing from 0 to nrows",
            ));
        }
        let segs = offsets.len() - 1;
        let mut value = Array2::zeros((segs, v.ncols()));
        for s in 0..segs {
            let block = v.slice(s![offsets[s]..offsets[s + 1], ..]);
            value.row_mut(s).assign(&block.mean_axis(Axis(0)).unwrap());
        }
        self.record_custom(&[a], value, move |g, ins, _| {
            let mut d = Array2::zeros(ins[0].raw_dim());
            for s in 0..offsets.len() - 1 {
                let cnt = (offsets[s + 1] - offsets[s]) as f64;
                let gs = g.row(s).to_owned() / cnt;
                for r in offsets[s]..offsets[s + 1] {
                    d.row_mut(r).assign(&gs);
                }
            }
            vec![d]
        })
    }

    /// Row-normalized neighbor average (self excluded); isolated nodes get 0.
    pub fn neighbor_mean(&mut self, a: Var, csr: Arc<Csr>) -> Result<Var> {
        let v = self.value(a);
        if v.nrows() != csr.num_nodes() {
            return Err(shape_err("neighbor_mean", "row count differs from node count"));
        }
        let mut value = Array2::zeros(v.raw_dim());
        for i in 0..csr.num_nodes() {
            let nb = csr.neighbors(i);
            if nb.is_empty() {
                continue;
            }
            let w = 1.0 / nb.len() as f64;
            let mut row = value.row_mut(i);
            for &j in nb {
                row.scaled_add(w, &v.row(j));
            }
        }
        self.record_custom(&[a], value, move |g, ins, _| {
            let mut d = Array2::zeros(ins[0].raw_dim());
            for i in 0..csr.num_nodes() {
                let nb = csr.neighbors(i);
                if nb.is_empty() {
                    continue;
                }
                let w = 1.0 / nb.len() as f64;
                for &j in nb {
                    d.row_mut(j).scaled_add(w, &g.row(i));
                }
            }
            vec![d]
        })
    }

    /// Squared Euclidean distance for each index pair, as a p x 1 column.
    pub fn euclidean_pair_sq_dist(&mut self, a: Var, pairs: Arc<Vec<(usize, usize)>>) -> Result<Var> {
        let v = self.value(a);
        check_pairs("euclidean_pair_sq_dist", &pairs, v.nrows())?;
        let value = Array2::from_shape_fn((pairs.len(), 1), |(p, _)| {
            let (i, j) = pairs[p];
            v.row(i).iter().zip(v.row(j)).map(|(x, y)| (x - y).powi(2)).sum()
        });
        self.record_custom(&[a], value, move |g, ins, _| {
            let x = ins[0];
            let mut d = Array2::zeros(x.raw_dim());
            for (p, &(i, j)) in pairs.iter().enumerate() {
                let diff = &x.row(i) - &x.row(j);
                let gp = 2.0 * g[[p, 0]];
                d.row_mut(i).scaled_add(gp, &diff);
                d.row_mut(j).scaled_add(-gp, &diff);
            }
            vec![d]
        })
    }

    // ---- hyperbolic primitives (rows are points) ---------------------------

    /// Exponential map at the origin applied to each row `z`, giving
    /// `[cosh |z|, sinh |z| z / |z|]`.
    pub fn exp_origin(&mut self, z: Var) -> Result<Var> {
        let v = self.value(z);
        let (rows, n) = v.dim();
        let mut value = Array2::zeros((rows, n + 1));
        for (zr, mut out) in v.rows().into_iter().zip(value.rows_mut()) {
            let r = zr.dot(&zr).sqrt();
            if r < EXP_ZERO_THRESHOLD {
                out[0] = 1.0;
                out.slice_mut(s![1..]).assign(&zr);
            } else {
                out[0] = r.cosh();
                out.slice_mut(s![1..]).assign(&(&zr * (r.sinh() / r)));
            }
        }
        self.record_custom(&[z], value, |g, ins, _| {
            let zv = ins[0];
            let mut d = Array2::zeros(zv.raw_dim());
            for ((zr, gr), mut dr) in zv.rows().into_iter().zip(g.rows()).zip(d.rows_mut()) {
                let gs = gr.slice(s![1..]);
                let r = zr.dot(&zr).sqrt();
                if r < EXP_ZERO_THRESHOLD {
                    dr.assign(&gs);
                    continue;
                }
                let sr = r.sinh() / r;
                // (r cosh r - sinh r) / r^3
                let c = if r < 1e-4 {
                    1.0 / 3.0 + r * r / 30.0
                } else {
                    (r * r.cosh() - r.sinh()) / (r * r * r)
                };
                let zg = zr.dot(&gs);
                dr.assign(&(&zr * (gr[0] * sr + zg * c)));
                dr.scaled_add(sr, &gs);
            }
            vec![d]
        })
    }

    /// `[x0, W x_{1:n}]` for each row, with `w` an n x n matrix.
    pub fn lorentz_linear(&mut self, h: Var, w: Var) -> Result<Var> {
        let (vh, vw) = (self.value(h), self.value(w));
        let n = vh.ncols().saturating_sub(1);
        if vw.dim() != (n, n) || n == 0 {
            return Err(shape_err(
                "lorentz_linear",
                format!("points {:?}, matrix {:?}", vh.dim(), vw.dim()),
            ));
        }
        let mut value = Array2::zeros(vh.raw_dim());
        value.column_mut(0).assign(&vh.column(0));
        value.slice_mut(s![.., 1..]).assign(&vh.slice(s![.., 1..]).dot(&vw.t()));
        self.record_custom(&[h, w], value, |g, ins, _| {
            let (x, w) = (ins[0], ins[1]);
            let gs = g.slice(s![.., 1..]);
            let mut dx = Array2::zeros(x.raw_dim());
            dx.column_mut(0).assign(&g.column(0));
            dx.slice_mut(s![.., 1..]).assign(&gs.dot(w));
            let dw = gs.t().dot(&x.slice(s![.., 1..]));
            vec![dx, dw]
        })
    }

    /// Sum over the closed neighborhood `{i} ∪ N(i)` of every node.
    pub fn neighbor_sum(&mut self, h: Var, csr: Arc<Csr>) -> Result<Var> {
        let v = self.value(h);
        if v.nrows() != csr.num_nodes() {
            return Err(shape_err("neighbor_sum", "row count differs from node count"));
        }
        let mut value = v.clone();
        for i in 0..csr.num_nodes() {
            let mut row = value.row_mut(i);
            for &j in csr.neighbors(i) {
                row += &v.row(j);
            }
        }
        self.record_custom(&[h], value, move |g, _, _| {
            let mut d = g.clone();
            for i in 0..csr.num_nodes() {
                for &j in csr.neighbors(i) {
                    d.row_mut(j).scaled_add(1.0, &g.row(i));
                }
            }
            vec![d]
        })
    }

    /// `s / sqrt(-<s, s>_L)` per row: rescales time-like vectors onto the
    /// hyperboloid.
    pub fn lorentz_normalize(&mut self, s_var: Var) -> Result<Var> {
        let v = self.value(s_var);
        let mut value = v.clone();
        for mut row in value.rows_mut() {
            let q = -minkowski_row(row.view(), row.view());
            if !(q > 0.0) || row[0] <= 0.0 {
                return Err(AutodiffError::Domain {
                    op: "lorentz_normalize",
                    detail: format!("row is not future time-like (-<s,s> = {q})"),
                });
            }
            row /= q.sqrt();
        }
        self.record_custom(&[s_var], value, |g, ins, _| {
            let sv = ins[0];
            let mut d = Array2::zeros(sv.raw_dim());
            for ((sr, gr), mut dr) in sv.rows().into_iter().zip(g.rows()).zip(d.rows_mut()) {
                let q = -minkowski_row(sr, sr);
                let a = q.powf(-0.5);
                let c = gr.dot(&sr) * a / q;
                dr.assign(&(&gr * a));
                dr[0] -= c * sr[0];
                let mut tail = dr.slice_mut(s![1..]);
                tail.scaled_add(c, &sr.slice(s![1..]));
            }
            vec![d]
        })
    }

    /// Recomputes `x0 = sqrt(1 + |x_{1:n}|^2)` for every row.
    pub fn reproject(&mut self, h: Var) -> Result<Var> {
        let mut value = self.value(h).clone();
        for mut row in value.rows_mut() {
            let tail = row.slice(s![1..]);
            row[0] = (1.0 + tail.dot(&tail)).sqrt();
        }
        self.record_custom(&[h], value, |g, _, out| {
            let mut d = Array2::zeros(g.raw_dim());
            for ((gr, orow), mut dr) in g.rows().into_iter().zip(out.rows()).zip(d.rows_mut()) {
                let mut tail = dr.slice_mut(s![1..]);
                tail.assign(&gr.slice(s![1..]));
                tail.scaled_add(gr[0] / orow[0], &orow.slice(s![1..]));
            }
            vec![d]
        })
    }

    /// `x_{1:n} / (x0 + 1)` per row, clamped inside the unit ball.
    pub fn lorentz_to_poincare(&mut self, h: Var) -> Result<Var> {
        let v = self.value(h);
        let (rows, cols) = v.dim();
        if cols < 2 {
            return Err(shape_err("lorentz_to_poincare", "need at least 2 columns"));
        }
        let mut value = Array2::zeros((rows, cols - 1));
        let mut clamped = vec![false; rows];
        for (i, (hr, mut out)) in v.rows().into_iter().zip(value.rows_mut()).enumerate() {
            out.assign(&(&hr.slice(s![1..]) / (hr[0] + 1.0)));
            clamped[i] = clamp_row(&mut out);
        }
        self.record_custom(&[h], value, move |g, ins, _| {
            let x = ins[0];
            let mut d = Array2::zeros(x.raw_dim());
            for (i, ((xr, gr), mut dr)) in x.rows().into_iter().zip(g.rows()).zip(d.rows_mut()).enumerate() {
                if clamped[i] {
                    continue;
                }
                let den = xr[0] + 1.0;
                let xs = xr.slice(s![1..]);
                dr[0] = -gr.dot(&xs) / (den * den);
                dr.slice_mut(s![1..]).assign(&(&gr / den));
            }
            vec![d]
        })
    }

    /// `[1 + |b|^2, 2b] / (1 - |b|^2)` per row.
    pub fn poincare_to_lorentz(&mut self, b: Var) -> Result<Var> {
        let v = self.value(b);
        let (rows, n) = v.dim();
        let mut value = Array2::zeros((rows, n + 1));
        for (br, mut out) in v.rows().into_iter().zip(value.rows_mut()) {
            let u = br.dot(&br);
            if !(u < 1.0) {
                return Err(AutodiffError::Domain {
                    op: "poincare_to_lorentz",
                    detail: format!("ball point with squared norm {u}"),
                });
            }
            let den = 1.0 - u;
            out[0] = (1.0 + u) / den;
            out.slice_mut(s![1..]).assign(&(&br * (2.0 / den)));
        }
        self.record_custom(&[b], value, |g, ins, _| {
            let bv = ins[0];
            let mut d = Array2::zeros(bv.raw_dim());
            for ((br, gr), mut dr) in bv.rows().into_iter().zip(g.rows()).zip(d.rows_mut()) {
                let u = br.dot(&br);
                let den = 1.0 - u;
                let gs = gr.slice(s![1..]);
                let coef = (4.0 * gr[0] + 4.0 * br.dot(&gs)) / (den * den);
                dr.assign(&(&br * coef));
                dr.scaled_add(2.0 / den, &gs);
            }
            vec![d]
        })
    }

    /// `x_{1:n} / x0` per row, clamped inside the unit ball.
    pub fn lorentz_to_klein(&mut self, h: Var) -> Result<Var> {
        let v = self.value(h);
        let (rows, cols) = v.dim();
        if cols < 2 {
            return Err(shape_err("lorentz_to_klein", "need at least 2 columns"));
        }
        let mut value = Array2::zeros((rows, cols - 1));
        let mut clamped = vec![false; rows];
        for (i, (hr, mut out)) in v.rows().into_iter().zip(value.rows_mut()).enumerate() {
            out.assign(&(&hr.slice(s![1..]) / hr[0]));
            clamped[i] = clamp_row(&mut out);
        }
        self.record_custom(&[h], value, move |g, ins, _| {
            let x = ins[0];
            let mut d = Array2::zeros(x.raw_dim());
            for (i, ((xr, gr), mut dr)) in x.rows().into_iter().zip(g.rows()).zip(d.rows_mut()).enumerate() {
                if clamped[i] {
                    continue;
                }
                let x0 = xr[0];
                dr[0] = -gr.dot(&xr.slice(s![1..])) / (x0 * x0);
                dr.slice_mut(s![1..]).assign(&(&gr / x0));
            }
            vec![d]
        })
    }

    /// `gamma(k) [1, k]` per row.
    pub fn klein_to_lorentz(&mut self, k: Var) -> Result<Var> {
        let v = self.value(k);
        let (rows, n) = v.dim();
        let mut value = Array2::zeros((rows, n + 1));
        for (kr, mut out) in v.rows().into_iter().zip(value.rows_mut()) {
            let u = kr.dot(&kr);
            if !(u < 1.0) {
                return Err(AutodiffError::Domain {
                    op: "klein_to_lorentz",
                    detail: format!("Klein point with squared norm {u}"),
                });
            }
            let gamma = 1.0 / (1.0 - u).sqrt();
            out[0] = gamma;
            out.slice_mut(s![1..]).assign(&(&kr * gamma));
        }
        self.record_custom(&[k], value, |g, ins, out| {
            let kv = ins[0];
            let mut d = Array2::zeros(kv.raw_dim());
            for (((kr, gr), orow), mut dr) in kv.rows().into_iter().zip(g.rows()).zip(out.rows()).zip(d.rows_mut()) {
                let gamma = orow[0];
                let gs = gr.slice(s![1..]);
                let coef = gamma.powi(3) * (gr[0] + gs.dot(&kr));
                dr.assign(&(&kr * coef));
                dr.scaled_add(gamma, &gs);
            }
            vec![d]
        })
    }

    /// Einstein midpoint in Klein coordinates over every closed neighborhood,
    /// weighted by Lorentz factors.
    pub fn klein_midpoint(&mut self, k: Var, csr: Arc<Csr>) -> Result<Var> {
        let v = self.value(k);
        if v.nrows() != csr.num_nodes() {
            return Err(shape_err("klein_midpoint", "row count differs from node count"));
        }
        let gamma: Vec<f64> = v.rows().into_iter().map(|r| 1.0 / (1.0 - r.dot(&r)).sqrt()).collect();
        if let Some(bad) = gamma.iter().position(|g| !g.is_finite()) {
            return Err(AutodiffError::Domain {
                op: "klein_midpoint",
                detail: format!("row {bad} is outside the unit ball"),
            });
        }
        let mut value = Array2::zeros(v.raw_dim());
        let mut totals = vec![0.0; csr.num_nodes()];
        for i in 0..csr.num_nodes() {
            let mut row = value.row_mut(i);
            let mut total = gamma[i];
            row.scaled_add(gamma[i], &v.row(i));
            for &j in csr.neighbors(i) {
                row.scaled_add(gamma[j], &v.row(j));
                total += gamma[j];
            }
            row /= total;
            totals[i] = total;
        }
        self.record_custom(&[k], value, move |g, ins, out| {
            let kv = ins[0];
            let mut d = Array2::zeros(kv.raw_dim());
            for (i, &total) in totals.iter().enumerate() {
                let gm = g.row(i);
                let m = out.row(i);
                let members = std::iter::once(i).chain(csr.neighbors(i).iter().copied());
                for j in members {
                    let kj = kv.row(j);
                    let gj = gamma[j];
                    let proj = gm
                        .iter()
                        .zip(kj.iter().zip(m.iter()))
                        .map(|(a, (b, c))| a * (b - c))
                        .sum::<f64>();
                    let mut dr = d.row_mut(j);
                    dr.scaled_add(gj / total, &gm);
                    dr.scaled_add(gj.powi(3) * proj / total, &kj);
                }
            }
            vec![d]
        })
    }

    /// Squared geodesic distance `arcosh(-<h_i, h_j>_L)^2` for each pair, as a
    /// p x 1 column.
    pub fn pair_sq_dist(&mut self, h: Var, pairs: Arc<Vec<(usize, usize)>>) -> Result<Var> {
        let v = self.value(h);
        check_pairs("pair_sq_dist", &pairs, v.nrows())?;
        let inner: Vec<f64> = pairs.iter().map(|&(i, j)| -minkowski_row(v.row(i), v.row(j))).collect();
        let value = Array2::from_shape_fn((pairs.len(), 1), |(p, _)| arcosh_clamped(inner[p]).powi(2));
        self.record_custom(&[h], value, move |g, ins, _| {
            let x = ins[0];
            let mut d = Array2::zeros(x.raw_dim());
            for (p, &(i, j)) in pairs.iter().enumerate() {
                let c = g[[p, 0]] * arcosh_sq_derivative(inner[p]);
                if c == 0.0 {
                    continue;
                }
                add_minus_metric(&mut d, i, x.row(j), c);
                add_minus_metric(&mut d, j, x.row(i), c);
            }
            vec![d]
        })
    }

    /// Geodesic distances between every row of `h` and every row of
    /// `centroids`: a |V| x |C| matrix.
    pub fn centroid_distance(&mut self, h: Var, centroids: Var) -> Result<Var> {
        let (vh, vc) = (self.value(h), self.value(centroids));
        if vh.ncols() != vc.ncols() {
            return Err(shape_err(
                "centroid_distance",
                format!("{:?} vs {:?}", vh.dim(), vc.dim()),
            ));
        }
        let inner = minkowski_matrix(vh, vc);
        let value = inner.mapv(arcosh_clamped);
        self.record_custom(&[h, centroids], value, move |g, ins, _| {
            let (x, c) = (ins[0], ins[1]);
            // dD/du with u = -<h, c>_L; du/dh = -G c.
            let mut coef = Array2::zeros(inner.raw_dim());
            Zip::from(&mut coef)
                .and(&inner)
                .and(g)
                .for_each(|k, &u, &gv| *k = gv * arcosh_derivative(u));
            let mut dx = coef.dot(c);
            dx.column_mut(0).mapv_inplace(|a| -a);
            dx.mapv_inplace(|a| -a);
            let mut dc = coef.t().dot(x);
            dc.column_mut(0).mapv_inplace(|a| -a);
            dc.mapv_inplace(|a| -a);
            vec![dx, dc]
        })
    }
}

/// `-<x, y>_L` for every row pair of `a` and `b`.
fn minkowski_matrix(a: &Tensor, b: &Tensor) -> Tensor {
    let mut spatial = a.slice(s![.., 1..]).dot(&b.slice(s![.., 1..]).t());
    let t0 = a.column(0);
    let c0 = b.column(0);
    for (i, mut row) in spatial.rows_mut().into_iter().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = t0[i] * c0[j] - *v;
        }
    }
    spatial
}

/// `d[row] += c * (-G y)` where `G = diag(-1, 1, ..., 1)`.
fn add_minus_metric(d: &mut Tensor, row: usize, y: ArrayView1<f64>, c: f64) {
    let mut dr = d.row_mut(row);
    dr[0] += c * y[0];
    for (a, b) in dr.iter_mut().skip(1).zip(y.iter().skip(1)) {
        *a -= c * b;
    }
}

fn clamp_row(row: &mut ndarray::ArrayViewMut1<f64>) -> bool {
    let norm = row.dot(row).sqrt();
    let max = 1.0 - BALL_EPS;
    if norm > max {
        *row *= max / norm;
        true
    } else {
        false
    }
}

fn check_pairs(op: &'static str, pairs: &[(usize, usize)], rows: usize) -> Result<()> {
    if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= rows || j >= rows) {
        return Err(shape_err(op, format!("pair ({i}, {j}) out of range for {rows} rows")));
    }
    Ok(())
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over all coordinates.
    pub max_rel_error: f64,
    /// `(parameter name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compares tape gradients against central differences for every parameter
/// coordinate. `build` records the scalar loss on a fresh tape given the
/// parameter vars; its errors are reported as domain errors. Relative error
/// uses `max(|a|, |b|, 1e-8)` as denominator.
pub fn grad_check<F, E>(params: &ParamSet, step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> std::result::Result<Var, E>,
    E: std::fmt::Display,
{
    let build = |tape: &mut Tape, vars: &[Var]| {
        build(tape, vars).map_err(|e| AutodiffError::Domain {
            op: "grad_check",
            detail: e.to_string(),
        })
    };
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = tape.load_params(p);
        let loss = build(&mut tape, &vars)?;
        let value = tape.value(loss)[[0, 0]];
        if !value.is_finite() {
            return Err(AutodiffError::Domain {
                op: "grad_check",
                detail: format!("loss evaluated to {value}"),
            });
        }
        Ok(value)
    };
    let mut tape = Tape::new();
    let vars = tape.load_params(params);
    let loss = build(&mut tape, &vars)?;
    if !tape.value(loss)[[0, 0]].is_finite() {
        return Err(AutodiffError::Domain {
            op: "grad_check",
            detail: "non-finite loss".into(),
        });
    }
    let grads = tape.backward(loss)?;

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for (id, p) in params.iter() {
        for flat in 0..p.value.len() {
            let orig = p.value.as_slice().expect("standard layout")[flat];
            probe.value_mut(id).as_slice_mut().unwrap()[flat] = orig + step;
            let up = eval(&probe)?;
            probe.value_mut(id).as_slice_mut().unwrap()[flat] = orig - step;
            let down = eval(&probe)?;
            probe.value_mut(id).as_slice_mut().unwrap()[flat] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.get(id).as_slice().unwrap()[flat];
            let denom = numeric.abs().max(analytic.abs()).max(1e-8);
            let rel = (numeric - analytic).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((p.name.clone(), flat));
            }
        }
    }
    Ok(report)
}
