//! The hyperbolic graph convolution stack, its task heads, and a Euclidean
//! GCN baseline.
//!
//! A layer maps Lorentz points through `blockdiag(1, W)` with orthogonal `W`,
//! averages every closed neighborhood with the Einstein midpoint, and applies
//! a nonlinearity in Poincaré coordinates. Inputs are reduced by an
//! unconstrained linear map and lifted with the exponential map at the
//! origin; class predictions come from geodesic distances to learned
//! centroids.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamId, ParamKind, ParamSet, Tape, Tensor, Unary, Var};
use crate::geometry::{
    self, exp_origin, klein_to_lorentz, lorentz_distance, lorentz_to_klein, lorentz_to_poincare, poincare_to_lorentz,
    GeometryError, LorentzPoint, PoincarePoint,
};
use crate::graphdata::{Csr, Edge};
use crate::optimizer::{orthogonal_init, OptimError, StiefelMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Orthogonality slack tolerated by [`lorentz_linear`] before it refuses.
pub const ORTHO_CONTRACT_TOL: f64 = 1e-6;

/// Nonlinearity applied to Poincaré (or, in the baseline, Euclidean)
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu { slope: f64 },
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu { slope: 0.01 }
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }

    /// Componentwise maps with `|sigma(x)| <= |x|` keep the unit ball closed.
    pub fn check_ball_preserving(self) -> Result<()> {
        match self {
            Activation::LeakyRelu { slope } if !(0.0..1.0).contains(&slope) => Err(ModelError::Contract(format!(
                "leaky-ReLU slope {slope} does not map the unit ball into itself"
            ))),
            _ => Ok(()),
        }
    }

    fn unary(self) -> Option<Unary> {
        match self {
            Activation::Identity => None,
            Activation::Relu => Some(Unary::Relu),
            Activation::LeakyRelu { slope } => Some(Unary::LeakyRelu(slope)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[default]
    Hyperbolic,
    EuclideanGcn,
}

/// How neighborhoods are averaged on the hyperboloid. Both routes compute
/// the Einstein midpoint; the Lorentz route normalizes the coordinate sum
/// and skips the Klein round trip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregationRoute {
    #[default]
    LorentzSum,
    Klein,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub architecture: Architecture,
    pub feat_dim: usize,
    /// Manifold (or embedding) dimension n.
    pub dim: usize,
    pub layers: usize,
    pub num_classes: usize,
    pub num_centroids: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub aggregation: AggregationRoute,
    /// Recompute the time coordinate after every layer.
    #[serde(default = "yes")]
    pub reproject: bool,
    pub r: f64,
    pub t: f64,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.feat_dim == 0 {
            return Err(ModelError::Config("layers, dim and feat_dim must be positive".into()));
        }
        if self.num_classes > 0 && self.num_centroids < self.num_classes {
            return Err(ModelError::Config(format!(
                "{} centroids cannot cover {} classes",
                self.num_centroids, self.num_classes
            )));
        }
        if !(self.t > 0.0) {
            return Err(ModelError::Config(format!(
                "Fermi-Dirac temperature must be positive, got {}",
                self.t
            )));
        }
        self.activation.check_ball_preserving()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ParamIds {
    input_proj: ParamId,
    input_bias: ParamId,
    layers: Vec<ParamId>,
    centroids: Option<ParamId>,
    classifier: ParamId,
    classifier_bias: ParamId,
}

/// Configuration plus trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    ids: ParamIds,
}

/// Node states after every stage of the forward pass; index 0 holds the
/// lifted inputs and index `l` the output of layer `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStates {
    pub layers: Vec<Tensor>,
}

impl NodeStates {
    pub fn final_layer(&self) -> &Tensor {
        self.layers.last().expect("at least the input layer")
    }

    /// Node `i` of layer `l` as a Lorentz point (hyperbolic models only).
    pub fn point(&self, layer: usize, i: usize) -> LorentzPoint {
        LorentzPoint::from_raw(self.layers[layer].row(i).to_vec())
    }
}

/// Tape handles for one encoded graph.
pub struct Encoded {
    pub layers: Vec<Var>,
}

impl Encoded {
    pub fn output(&self) -> Var {
        *self.layers.last().unwrap()
    }
}

fn layer_name(l: usize) -> String {
    format!("layer{l}")
}

impl Model {
    /// Seeded initialization: orthogonal layer matrices, Gaussian input
    /// projection and classifier, small random centroid tangent vectors.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let gauss = |rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64| {
            let d = Normal::new(0.0, std).unwrap();
            Array2::from_shape_simple_fn(shape, || d.sample(rng))
        };
        let n = config.dim;
        let input_proj = params.add(
            "input_proj",
            ParamKind::Euclidean,
            gauss(&mut rng, (config.feat_dim, n), 1.0 / (config.feat_dim as f64).sqrt()),
        );
        let input_bias = params.add("input_bias", ParamKind::Euclidean, Array2::zeros((1, n)));
        let kind = match config.architecture {
            Architecture::Hyperbolic => ParamKind::Stiefel,
            Architecture::EuclideanGcn => ParamKind::Euclidean,
        };
        let layers = (0..config.layers)
            .map(|l| {
                let w = orthogonal_init(n, n, seed.wrapping_mul(1000).wrapping_add(l as u64 + 1))?;
                Ok(params.add(layer_name(l), kind, w.into_inner()))
            })
            .collect::<Result<Vec<_>>>()?;
        let classes = config.num_classes.max(1);
        let (centroids, head_in) = match config.architecture {
            Architecture::Hyperbolic => {
                let c = params.add(
                    "centroids",
                    ParamKind::Euclidean,
                    gauss(&mut rng, (config.num_centroids, n), 1.0 / (n as f64).sqrt()),
                );
                (Some(c), config.num_centroids)
            }
            Architecture::EuclideanGcn => (None, n),
        };
        let classifier = params.add(
            "classifier",
            ParamKind::Euclidean,
            gauss(&mut rng, (head_in, classes), 1.0 / (head_in as f64).sqrt()),
        );
        let classifier_bias = params.add("classifier_bias", ParamKind::Euclidean, Array2::zeros((1, classes)));
        Ok(Self {
            config,
            params,
            ids: ParamIds {
                input_proj,
                input_bias,
                layers,
                centroids,
                classifier,
                classifier_bias,
            },
        })
    }

    /// Rebuilds a model from stored parameters, matching them by name.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let template = Model::new(config.clone(), 0)?;
        if template.params.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter arrays, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (id, p) in template.params.iter() {
            let stored = params.get(id);
            if stored.name != p.name || stored.value.dim() != p.value.dim() || stored.kind != p.kind {
                return Err(ModelError::Config(format!(
                    "parameter {} does not match `{}` {:?}",
                    id.0,
                    p.name,
                    p.value.dim()
                )));
            }
        }
        Ok(Self {
            config,
            params,
            ids: template.ids,
        })
    }

    pub fn layer_ids(&self) -> &[ParamId] {
        &self.ids.layers
    }

    pub fn centroid_id(&self) -> Option<ParamId> {
        self.ids.centroids
    }

    /// Layer sub-matrix `W_l` as a Stiefel matrix (hyperbolic models).
    pub fn layer_matrix(&self, l: usize) -> Result<StiefelMatrix> {
        Ok(StiefelMatrix::new(self.params.value(self.ids.layers[l]).clone())?)
    }

    /// The full `(n+1) x (n+1)` map `blockdiag(1, W_l)` of layer `l`.
    pub fn transformation_matrix(&self, l: usize) -> Tensor {
        let w = self.params.value(self.ids.layers[l]);
        let n = w.nrows();
        let mut full = Array2::zeros((n + 1, n + 1));
        full[[0, 0]] = 1.0;
        full.slice_mut(s![1.., 1..]).assign(w);
        full
    }

    /// Largest `|W^T W - I|` over the layer matrices.
    pub fn max_orthonormality_error(&self) -> f64 {
        self.ids
            .layers
            .iter()
            .map(|&id| crate::optimizer::orthonormality_error(self.params.value(id)))
            .fold(0.0, f64::max)
    }

    /// Records the encoder on `tape` and returns every layer's states.
    pub fn encode(&self, tape: &mut Tape, vars: &[Var], csr: &Arc<Csr>, features: Var) -> Result<Encoded> {
        let cfg = &self.config;
        let proj = tape.matmul(features, vars[self.ids.input_proj.0])?;
        let z = tape.add_row(proj, vars[self.ids.input_bias.0])?;
        let mut layers = Vec::with_capacity(cfg.layers + 1);
        match cfg.architecture {
            Architecture::Hyperbolic => {
                let mut h = tape.exp_origin(z)?;
                layers.push(h);
                for &w in &self.ids.layers {
                    let hbar = tape.lorentz_linear(h, vars[w.0])?;
                    let m = match cfg.aggregation {
                        AggregationRoute::LorentzSum => {
                            let sum = tape.neighbor_sum(hbar, csr.clone())?;
                            tape.lorentz_normalize(sum)?
                        }
                        AggregationRoute::Klein => {
                            let k = tape.lorentz_to_klein(hbar)?;
                            let mk = tape.klein_midpoint(k, csr.clone())?;
                            tape.klein_to_lorentz(mk)?
                        }
                    };
                    h = match cfg.activation.unary() {
                        None => m,
                        Some(op) => {
                            let b = tape.lorentz_to_poincare(m)?;
                            let a = tape.unary(b, op)?;
                            tape.poincare_to_lorentz(a)?
                        }
                    };
                    if cfg.reproject {
                        h = tape.reproject(h)?;
                    }
                    layers.push(h);
                }
            }
            Architecture::EuclideanGcn => {
                let mut h = z;
                layers.push(h);
                for &w in &self.ids.layers {
                    // Rows are nodes, so W h_i becomes H W^T; storing W^T
                    // directly is equivalent for an unconstrained matrix.
                    let hbar = tape.matmul(h, vars[w.0])?;
                    let agg = tape.neighbor_mean(hbar, csr.clone())?;
                    let m = tape.add(hbar, agg)?;
                    h = match cfg.activation.unary() {
                        None => m,
                        Some(op) => tape.unary(m, op)?,
                    };
                    layers.push(h);
                }
            }
        }
        Ok(Encoded { layers })
    }

    /// Squared distances for `pairs` under the model's geometry.
    pub fn pair_sq_dist(&self, tape: &mut Tape, emb: Var, pairs: Arc<Vec<Edge>>) -> Result<Var> {
        Ok(match self.config.architecture {
            Architecture::Hyperbolic => tape.pair_sq_dist(emb, pairs)?,
            Architecture::EuclideanGcn => tape.euclidean_pair_sq_dist(emb, pairs)?,
        })
    }

    /// Binary cross-entropy of Fermi-Dirac scores over positives and
    /// negatives.
    pub fn lp_loss(&self, tape: &mut Tape, emb: Var, pos: &[Edge], neg: &[Edge]) -> Result<Var> {
        let pairs: Vec<Edge> = pos.iter().chain(neg).copied().collect();
        let targets: Vec<f64> = std::iter::repeat_n(1.0, pos.len())
            .chain(std::iter::repeat_n(0.0, neg.len()))
            .collect();
        let d2 = self.pair_sq_dist(tape, emb, Arc::new(pairs))?;
        // logit of the Fermi-Dirac probability is (r - d^2) / t
        let neg_d2 = tape.scale(d2, -1.0 / self.config.t)?;
        let logits = tape.shift(neg_d2, self.config.r / self.config.t)?;
        Ok(tape.bce_with_logits(logits, Arc::new(targets))?)
    }

    /// Per-node class logits: `D W + b` where `D` holds centroid distances
    /// (hyperbolic) or the embeddings themselves (baseline).
    pub fn node_features_for_head(&self, tape: &mut Tape, vars: &[Var], emb: Var) -> Result<Var> {
        Ok(match self.ids.centroids {
            Some(c) => {
                let centroids = tape.exp_origin(vars[c.0])?;
                tape.centroid_distance(emb, centroids)?
            }
            None => emb,
        })
    }

    fn classify(&self, tape: &mut Tape, vars: &[Var], rows: Var) -> Result<Var> {
        let lin = tape.matmul(rows, vars[self.ids.classifier.0])?;
        Ok(tape.add_row(lin, vars[self.ids.classifier_bias.0])?)
    }

    pub fn node_logits(&self, tape: &mut Tape, vars: &[Var], emb: Var) -> Result<Var> {
        let d = self.node_features_for_head(tape, vars, emb)?;
        self.classify(tape, vars, d)
    }

    /// Average-pooled readout over graph segments, then the classifier.
    pub fn graph_logits(&self, tape: &mut Tape, vars: &[Var], emb: Var, offsets: Arc<Vec<usize>>) -> Result<Var> {
        let d = self.node_features_for_head(tape, vars, emb)?;
        let pooled = tape.segment_mean(d, offsets)?;
        self.classify(tape, vars, pooled)
    }

    /// Centroids materialized on the hyperboloid.
    pub fn centroids(&self) -> Option<Vec<LorentzPoint>> {
        self.ids.centroids.map(|c| {
            self.params
                .value(c)
                .rows()
                .into_iter()
                .map(|r| exp_origin(r.as_slice().unwrap()))
                .collect()
        })
    }

    /// Runs the encoder without recording gradients of interest.
    pub fn forward(&self, csr: &Arc<Csr>, features: &Tensor) -> Result<NodeStates> {
        if features.nrows() != csr.num_nodes() {
            return Err(ModelError::Config(format!(
                "{} feature rows for {} nodes",
                features.nrows(),
                csr.num_nodes()
            )));
        }
        let mut tape = Tape::new();
        let vars = tape.load_params(&self.params);
        let x = tape.constant(features.clone());
        let enc = self.encode(&mut tape, &vars, csr, x)?;
        Ok(NodeStates {
            layers: enc.layers.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }

    /// Fermi-Dirac probabilities for `pairs` given final embeddings.
    pub fn edge_scores(&self, emb: &Tensor, pairs: &[Edge]) -> Vec<f64> {
        let (r, t) = (self.config.r, self.config.t);
        pairs
            .iter()
            .map(|&(i, j)| {
                let d2 = match self.config.architecture {
                    Architecture::Hyperbolic => {
                        let u = -geometry::minkowski(emb.row(i).as_slice().unwrap(), emb.row(j).as_slice().unwrap());
                        geometry::arcosh_clamped(u).powi(2)
                    }
                    Architecture::EuclideanGcn => (&emb.row(i) - &emb.row(j)).mapv(|v| v * v).sum(),
                };
                fermi_dirac_sq(d2, r, t)
            })
            .collect()
    }
}

// ---- pointwise reference operations -------------------------------------

/// Reduces Euclidean features and lifts them with the exponential map at the
/// origin: `exp_o([0, x P + b])`.
pub fn embed_input(features: &[f64], proj: &Tensor, bias: &[f64]) -> Result<LorentzPoint> {
    if proj.nrows() != features.len() || proj.ncols() != bias.len() {
        return Err(ModelError::Config(format!(
            "features {} / projection {:?} / bias {}",
            features.len(),
            proj.dim(),
            bias.len()
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::Domain("non-finite input features".into()).into());
    }
    let z = Array1::from(features.to_vec()).dot(proj) + Array1::from(bias.to_vec());
    Ok(exp_origin(z.as_slice().unwrap()))
}

/// `[x0, W x_{1:n}]`: an isometry of the hyperboloid that fixes the time
/// coordinate.
pub fn lorentz_linear(x: &LorentzPoint, w: &StiefelMatrix) -> Result<LorentzPoint> {
    let m = w.as_array();
    if m.dim() != (x.dim(), x.dim()) {
        return Err(ModelError::Config(format!(
            "matrix {:?} for dimension {}",
            m.dim(),
            x.dim()
        )));
    }
    let err = w.orthonormality_error();
    if err > ORTHO_CONTRACT_TOL {
        return Err(ModelError::Contract(format!(
            "layer matrix lost orthogonality ({err:e})"
        )));
    }
    let spatial = m.dot(&ndarray::ArrayView1::from(x.spatial()));
    let mut coords = Vec::with_capacity(x.dim() + 1);
    coords.push(x.time());
    coords.extend(spatial.iter());
    Ok(LorentzPoint::from_raw(coords))
}

/// Einstein midpoint of `{i} ∪ N(i)`, computed through the Klein model.
pub fn aggregate_neighbors(states: &[LorentzPoint], csr: &Csr, i: usize) -> Result<LorentzPoint> {
    let members: Vec<_> = std::iter::once(i)
        .chain(csr.neighbors(i).iter().copied())
        .map(|j| lorentz_to_klein(&states[j]))
        .collect();
    Ok(klein_to_lorentz(&geometry::einstein_midpoint(&members)?))
}

/// Applies `sigma` in Poincaré coordinates and maps back to the hyperboloid.
pub fn hyperbolic_activation(m: &LorentzPoint, activation: Activation) -> Result<LorentzPoint> {
    activation.check_ball_preserving()?;
    let b = lorentz_to_poincare(m);
    let out: Vec<f64> = b.coords().iter().map(|&v| activation.apply(v)).collect();
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm >= 1.0 {
        return Err(ModelError::Contract(format!(
            "activation left the unit ball (norm {norm})"
        )));
    }
    Ok(poincare_to_lorentz(&PoincarePoint::new(out)?))
}

fn fermi_dirac_sq(d2: f64, r: f64, t: f64) -> f64 {
    crate::autodiff::sigmoid((r - d2) / t)
}

/// Edge probability `1 / (exp((d^2 - r) / t) + 1)`.
pub fn fermi_dirac(hi: &LorentzPoint, hj: &LorentzPoint, r: f64, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(ModelError::Config(format!("temperature must be positive, got {t}")));
    }
    let d = lorentz_distance(hi, hj)?;
    Ok(1.0 / (((d * d - r) / t).exp() + 1.0))
}

/// `D[i, j] = d(h_i, c_j)`.
pub fn centroid_distances(embeddings: &[LorentzPoint], centroids: &[LorentzPoint]) -> Result<Tensor> {
    let mut d = Array2::zeros((embeddings.len(), centroids.len()));
    for (i, h) in embeddings.iter().enumerate() {
        for (j, c) in centroids.iter().enumerate() {
            d[[i, j]] = lorentz_distance(h, c)?;
        }
    }
    Ok(d)
}

/// `d W + b` for one row of centroid distances.
pub fn nc_logits(d_row: &[f64], classifier: &Tensor, bias: &[f64]) -> Result<Vec<f64>> {
    if classifier.nrows() != d_row.len() || classifier.ncols() != bias.len() {
        return Err(ModelError::Config(format!(
            "row of {} distances for classifier {:?}",
            d_row.len(),
            classifier.dim()
        )));
    }
    let out = Array1::from(d_row.to_vec()).dot(classifier) + Array1::from(bias.to_vec());
    Ok(out.to_vec())
}

/// Average pooling of the distance matrix rows.
pub fn gc_readout(d: &Tensor) -> Result<Vec<f64>> {
    d.mean_axis(Axis(0))
        .map(|m| m.to_vec())
        .ok_or_else(|| ModelError::Config("empty distance matrix".into()))
}

/// One Euclidean GCN layer: `h' = sigma(W h_i + sum_j w_ij W h_j)` with
/// `w_ij = 1 / |N(i)|`. Rows of `states` are nodes.
pub fn euclidean_gcn_layer(states: &Tensor, csr: &Csr, w: &Tensor, activation: Activation) -> Result<Tensor> {
    if w.ncols() != states.ncols() || states.nrows() != csr.num_nodes() {
        return Err(ModelError::Config(format!(
            "states {:?}, W {:?}",
            states.dim(),
            w.dim()
        )));
    }
    let hbar = states.dot(&w.t());
    let mut out = hbar.clone();
    for i in 0..csr.num_nodes() {
        let nb = csr.neighbors(i);
        if nb.is_empty() {
            continue;
        }
        let wij = 1.0 / nb.len() as f64;
        for &j in nb {
            let row = hbar.row(j).to_owned();
            out.row_mut(i).scaled_add(wij, &row);
        }
    }
    out.mapv_inplace(|v| activation.apply(v));
    Ok(out)
}

/// Max `|<h, h>_L + 1|` and min `h0` over all rows.
pub fn manifold_report(states: &Tensor) -> (f64, f64) {
    let mut worst = 0.0f64;
    let mut min_time = f64::INFINITY;
    for row in states.rows() {
        let r = row.as_slice().unwrap();
        worst = worst.max((geometry::minkowski(r, r) + 1.0).abs());
        min_time = min_time.min(r[0]);
    }
    (worst, min_time)
}

/// Spatial block of a point matrix, for callers that need `x_{1:n}`.
pub fn spatial_block(states: &Tensor) -> Tensor {
    states.slice(s![.., 1..]).to_owned()
}
