//! Training and evaluation loops for link prediction, node classification
//! and graph classification, plus configuration, results and the CLI.

mod checkpoint;
mod cli;
pub mod metrics;
mod selftest;

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Grads, ParamSet, Tape, Tensor, Var};
use crate::graphdata::{
    make_lp_split, materialize, sample_negatives_with, stratified_split, Csr, Dataset, DatasetSpec, Edge, Graph,
    GraphError, IndexSplit, LpSplit,
};
use crate::model::{Activation, AggregationRoute, Architecture, Model, ModelConfig, ModelError};
use crate::optimizer::{apply_step, EuclideanRule, OptState, OptimError, STIEFEL_TOL};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use cli::cli_main;
pub use selftest::{run_selftest, SuiteOutcome};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Json { path: String, msg: String },
    #[error(
        "non-finite {what} at epoch {epoch} (loss {loss}, lr_riemannian {lr_riemannian}, lr_euclidean {lr_euclidean})"
    )]
    NonFinite {
        what: &'static str,
        epoch: usize,
        loss: f64,
        lr_riemannian: f64,
        lr_euclidean: f64,
    },
    #[error(
        "training diverged at epoch {epoch} (lr_riemannian {lr_riemannian}, lr_euclidean {lr_euclidean}): {detail}"
    )]
    Diverged {
        epoch: usize,
        lr_riemannian: f64,
        lr_euclidean: f64,
        detail: String,
    },
    #[error("manifold check failed at epoch {epoch}: {detail}")]
    Manifold { epoch: usize, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("label error: {0}")]
    Label(String),
}

pub type Result<T> = std::result::Result<T, RunError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Lp,
    Nc,
    Gc,
}

/// Everything a run needs; mirrors the JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default = "d_dim")]
    pub dim: usize,
    #[serde(default = "d_layers")]
    pub layers: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub lr_riemannian: f64,
    #[serde(default = "d_lr")]
    pub lr_euclidean: f64,
    #[serde(default)]
    pub euclidean_rule: EuclideanRule,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_centroids")]
    pub num_centroids: usize,
    /// Expected number of classes; labels at or above it are rejected.
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default = "d_r")]
    pub r: f64,
    #[serde(default = "d_t")]
    pub t: f64,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub aggregation: AggregationRoute,
    #[serde(default = "d_true")]
    pub reproject: bool,
    /// Weight of the link-prediction regularizer in node classification.
    #[serde(default = "d_lambda")]
    pub lambda_lp: f64,
    #[serde(default = "d_patience")]
    pub patience: usize,
    /// Train / validation / test fractions of labeled nodes.
    #[serde(default = "d_node_split")]
    pub node_split: [f64; 3],
    pub dataset: DatasetSpec,
}

fn d_dim() -> usize {
    16
}
fn d_layers() -> usize {
    2
}
fn d_epochs() -> usize {
    500
}
fn d_lr() -> f64 {
    0.01
}
fn d_centroids() -> usize {
    16
}
fn d_r() -> f64 {
    2.0
}
fn d_t() -> f64 {
    1.0
}
fn d_true() -> bool {
    true
}
fn d_lambda() -> f64 {
    1.0
}
fn d_patience() -> usize {
    100
}
fn d_node_split() -> [f64; 3] {
    [0.3, 0.2, 0.5]
}

impl TrainConfig {
    /// Defaults for every optional field.
    pub fn new(task: Task, dataset: DatasetSpec) -> Self {
        Self {
            task,
            architecture: Architecture::default(),
            dim: d_dim(),
            layers: d_layers(),
            epochs: d_epochs(),
            lr_riemannian: d_lr(),
            lr_euclidean: d_lr(),
            euclidean_rule: EuclideanRule::default(),
            seed: 0,
            num_centroids: d_centroids(),
            num_classes: None,
            r: d_r(),
            t: d_t(),
            activation: Activation::default(),
            aggregation: AggregationRoute::default(),
            reproject: true,
            lambda_lp: d_lambda(),
            patience: d_patience(),
            node_split: d_node_split(),
            dataset,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(RunError::Config(msg));
        if self.dim == 0 || self.layers == 0 || self.epochs == 0 || self.patience == 0 {
            return bad("dim, layers, epochs and patience must be positive".into());
        }
        for (name, v) in [
            ("lr_riemannian", self.lr_riemannian),
            ("lr_euclidean", self.lr_euclidean),
            ("lambda_lp", self.lambda_lp),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.t > 0.0) || !self.r.is_finite() {
            return bad(format!("need finite r and positive t, got r={} t={}", self.r, self.t));
        }
        if self.num_classes == Some(0) {
            return bad("num_classes must be positive".into());
        }
        let sum: f64 = self.node_split.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.node_split.iter().any(|f| *f < 0.0) {
            return bad(format!(
                "node_split {:?} must be non-negative and sum to 1",
                self.node_split
            ));
        }
        self.dataset.validate()?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn model_config(&self, feat_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            architecture: self.architecture,
            feat_dim,
            dim: self.dim,
            layers: self.layers,
            num_classes,
            num_centroids: self.num_centroids.max(num_classes),
            activation: self.activation,
            aggregation: self.aggregation,
            reproject: self.reproject,
            r: self.r,
            t: self.t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_metric: f64,
    pub val_metric: f64,
}

/// Outcome of one run. Record `e` describes the parameters after `e`
/// updates; the test metrics are computed once, from the parameters of the
/// best validation epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub task: Task,
    pub metric: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub test_metric: f64,
    pub test: BTreeMap<String, f64>,
    pub seed: u64,
    pub config_sha256: String,
    pub config: TrainConfig,
    /// Kept out of the JSON so identical runs serialize identically.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl RunResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes") + "\n"
    }
}

/// A finished run together with its best-validation model.
#[derive(Debug, Clone)]
pub struct Trained {
    pub result: RunResult,
    pub model: Model,
}

/// What a loop needs from one optimization step.
struct StepOutput {
    loss: f64,
    grads: Grads,
    train_metric: f64,
    val_metric: f64,
}

trait TaskRun {
    fn metric_name(&self) -> &'static str;
    fn step(&self, model: &Model, rng: &mut ChaCha8Rng, epoch: usize) -> Result<StepOutput>;
    fn test(&self, model: &Model) -> Result<BTreeMap<String, f64>>;
}

struct Seeds {
    split: u64,
    init: u64,
    loop_rng: ChaCha8Rng,
}

fn derive_seeds(seed: u64) -> Seeds {
    let mut root = ChaCha8Rng::seed_from_u64(seed);
    Seeds {
        split: root.next_u64(),
        init: root.next_u64(),
        loop_rng: root,
    }
}

/// Trains according to `config`, streaming epoch records to `observer`.
pub fn run(config: &TrainConfig, observer: &mut dyn FnMut(&EpochRecord)) -> Result<Trained> {
    config.validate()?;
    let start = Instant::now();
    let seeds = derive_seeds(config.seed);
    let data = materialize(&config.dataset)?;
    let (task, model_cfg): (Box<dyn TaskRun>, ModelConfig) = build_task(config, data, seeds.split)?;
    let mut model = Model::new(model_cfg, seeds.init)?;
    let mut rng = seeds.loop_rng;
    let mut state = OptState::new(
        &model.params,
        config.lr_riemannian,
        config.lr_euclidean,
        config.euclidean_rule,
    )?;
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, ParamSet)> = None;
    for epoch in 0..config.epochs {
        let out = task.step(&model, &mut rng, epoch).map_err(|e| match e {
            // Domain failures after an update mean the parameters left the
            // region where the forward pass is defined.
            RunError::Model(ModelError::Autodiff(AutodiffError::Domain { .. }))
            | RunError::Model(ModelError::Geometry(_))
            | RunError::Autodiff(AutodiffError::Domain { .. })
                if epoch > 0 =>
            {
                RunError::Diverged {
                    epoch,
                    lr_riemannian: config.lr_riemannian,
                    lr_euclidean: config.lr_euclidean,
                    detail: e.to_string(),
                }
            }
            e => e,
        })?;
        let non_finite = |what| RunError::NonFinite {
            what,
            epoch,
            loss: out.loss,
            lr_riemannian: config.lr_riemannian,
            lr_euclidean: config.lr_euclidean,
        };
        if !out.loss.is_finite() {
            return Err(non_finite("loss"));
        }
        if !out.grads.all_finite() {
            return Err(non_finite("gradient"));
        }
        let record = EpochRecord {
            epoch,
            train_loss: out.loss,
            train_metric: out.train_metric,
            val_metric: out.val_metric,
        };
        observer(&record);
        epochs.push(record);
        if best.as_ref().is_none_or(|b| out.val_metric > b.1) {
            best = Some((epoch, out.val_metric, model.params.clone()));
        }
        let best_epoch = best.as_ref().unwrap().0;
        if epoch - best_epoch >= config.patience {
            break;
        }
        apply_step(&mut model.params, &out.grads, &mut state)?;
        check_parameters(&model, epoch)?;
    }
    let (best_epoch, best_val, params) = best.expect("at least one epoch");
    model.params = params;
    let test = task.test(&model)?;
    let metric = task.metric_name().to_string();
    let test_metric = test[&metric];
    Ok(Trained {
        result: RunResult {
            task: config.task,
            metric,
            epochs,
            best_epoch,
            best_val,
            test_metric,
            test,
            seed: config.seed,
            config_sha256: config.hash(),
            config: config.clone(),
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
        model,
    })
}

pub fn train_lp(config: &TrainConfig) -> Result<RunResult> {
    expect_task(config, Task::Lp)?;
    Ok(run(config, &mut |_| {})?.result)
}

pub fn train_nc(config: &TrainConfig) -> Result<RunResult> {
    expect_task(config, Task::Nc)?;
    Ok(run(config, &mut |_| {})?.result)
}

pub fn train_gc(config: &TrainConfig) -> Result<RunResult> {
    expect_task(config, Task::Gc)?;
    Ok(run(config, &mut |_| {})?.result)
}

fn expect_task(config: &TrainConfig, task: Task) -> Result<()> {
    if config.task != task {
        return Err(RunError::Config(format!(
            "expected a {task:?} config, got {:?}",
            config.task
        )));
    }
    Ok(())
}

/// Test metrics of `model` on the split that `config` describes.
pub fn evaluate(model: &Model, config: &TrainConfig) -> Result<BTreeMap<String, f64>> {
    config.validate()?;
    let seeds = derive_seeds(config.seed);
    let data = materialize(&config.dataset)?;
    let (task, _) = build_task(config, data, seeds.split)?;
    task.test(model)
}

/// Final-layer node states of graph `index` (0 for single-graph tasks) as
/// the model sees it during training.
pub fn embeddings(model: &Model, config: &TrainConfig, index: usize) -> Result<Tensor> {
    config.validate()?;
    let seeds = derive_seeds(config.seed);
    let graph = match (materialize(&config.dataset)?, config.task) {
        (Dataset::Single(g), Task::Lp) => make_lp_split(&g, config.dataset.split, seeds.split)?.train_graph,
        (Dataset::Single(g), _) if index == 0 => g,
        (Dataset::Collection(mut gs), _) if index < gs.len() => gs.swap_remove(index),
        _ => return Err(RunError::Config(format!("no graph with index {index}"))),
    };
    Ok(model
        .forward(graph.csr(), &graph.features_or_ones())?
        .final_layer()
        .clone())
}

fn build_task(config: &TrainConfig, data: Dataset, split_seed: u64) -> Result<(Box<dyn TaskRun>, ModelConfig)> {
    match (config.task, data) {
        (Task::Lp, Dataset::Single(g)) => {
            let run = LpRun::new(g, config.dataset.split, split_seed)?;
            let cfg = config.model_config(run.features.ncols(), 0);
            Ok((Box::new(run), cfg))
        }
        (Task::Nc, Dataset::Single(g)) => {
            let run = NcRun::new(g, config, split_seed)?;
            let cfg = config.model_config(run.features.ncols(), run.num_classes);
            Ok((Box::new(run), cfg))
        }
        (Task::Gc, Dataset::Collection(gs)) => {
            let run = GcRun::new(gs, config, split_seed)?;
            let cfg = config.model_config(run.feat_dim, run.num_classes);
            Ok((Box::new(run), cfg))
        }
        (task, _) => Err(RunError::Config(format!(
            "task {task:?} needs a {} dataset",
            if task == Task::Gc {
                "multi-graph"
            } else {
                "single-graph"
            }
        ))),
    }
}

fn check_parameters(model: &Model, epoch: usize) -> Result<()> {
    if model.config.architecture == Architecture::Hyperbolic {
        let err = model.max_orthonormality_error();
        if !(err <= STIEFEL_TOL) {
            return Err(RunError::Manifold {
                epoch,
                detail: format!("layer matrix orthonormality error {err:e}"),
            });
        }
    }
    if model.params.iter().any(|(_, p)| p.value.iter().any(|v| !v.is_finite())) {
        return Err(RunError::Manifold {
            epoch,
            detail: "non-finite parameter".into(),
        });
    }
    Ok(())
}

/// Every hyperbolic node state must sit on the upper sheet; drift is
/// measured relative to `h0^2`, the scale of the rounding error.
fn check_states(model: &Model, states: &Tensor, epoch: usize) -> Result<()> {
    if model.config.architecture != Architecture::Hyperbolic {
        return Ok(());
    }
    for (i, row) in states.rows().into_iter().enumerate() {
        let r = row.as_slice().unwrap();
        let resid = (crate::geometry::minkowski(r, r) + 1.0).abs();
        if !(r[0] > 0.0) || !(resid <= 1e-6 * r[0].powi(2).max(1.0)) {
            return Err(RunError::Manifold {
                epoch,
                detail: format!("node {i}: time coordinate {} residual {resid:e}", r[0]),
            });
        }
    }
    Ok(())
}

// ---- link prediction ------------------------------------------------------

struct LpRun {
    full: Graph,
    split: LpSplit,
    features: Tensor,
}

impl LpRun {
    fn new(g: Graph, fractions: [f64; 3], seed: u64) -> Result<Self> {
        let split = make_lp_split(&g, fractions, seed)?;
        if split.val_pos.is_empty() || split.test_pos.is_empty() {
            return Err(RunError::EmptySplit(
                "link prediction needs validation and test edges".into(),
            ));
        }
        let features = g.features_or_ones();
        Ok(Self {
            full: g,
            split,
            features,
        })
    }

    fn auc(model: &Model, emb: &Tensor, pos: &[Edge], neg: &[Edge]) -> Result<f64> {
        metrics::roc_auc(&model.edge_scores(emb, pos), &model.edge_scores(emb, neg))
    }
}

impl TaskRun for LpRun {
    fn metric_name(&self) -> &'static str {
        "auc"
    }

    fn step(&self, model: &Model, rng: &mut ChaCha8Rng, epoch: usize) -> Result<StepOutput> {
        let train_pos = &self.split.train_pos;
        let neg = sample_negatives_with(rng, &self.full, train_pos.len(), &HashSet::new())?;
        let mut tape = Tape::new();
        let vars = tape.load_params(&model.params);
        let x = tape.constant(self.features.clone());
        let emb = model
            .encode(&mut tape, &vars, self.split.train_graph.csr(), x)?
            .output();
        let loss = model.lp_loss(&mut tape, emb, train_pos, &neg)?;
        let states = tape.value(emb).clone();
        check_states(model, &states, epoch)?;
        let loss_value = tape.value(loss)[[0, 0]];
        let grads = tape.backward(loss)?;
        Ok(StepOutput {
            loss: loss_value,
            grads,
            train_metric: Self::auc(model, &states, train_pos, &neg)?,
            val_metric: Self::auc(model, &states, &self.split.val_pos, &self.split.val_neg)?,
        })
    }

    fn test(&self, model: &Model) -> Result<BTreeMap<String, f64>> {
        let states = model.forward(self.split.train_graph.csr(), &self.features)?;
        let auc = Self::auc(model, states.final_layer(), &self.split.test_pos, &self.split.test_neg)?;
        Ok(BTreeMap::from([("auc".to_string(), auc)]))
    }
}

// ---- node classification --------------------------------------------------

struct NcRun {
    graph: Graph,
    features: Tensor,
    labels: Arc<Vec<usize>>,
    split: IndexSplit,
    train_rows: Arc<Vec<usize>>,
    num_classes: usize,
    lambda_lp: f64,
}

impl NcRun {
    fn new(graph: Graph, config: &TrainConfig, seed: u64) -> Result<Self> {
        let labels = graph
            .node_labels
            .clone()
            .ok_or_else(|| RunError::Config("node classification needs node labels".into()))?;
        let observed = labels.iter().max().map_or(0, |m| m + 1);
        let num_classes = match config.num_classes {
            Some(k) if observed > k => {
                return Err(RunError::Label(format!("label {} outside 0..{k}", observed - 1)));
            }
            Some(k) => k,
            None => observed,
        };
        let split = stratified_split(&labels, config.node_split, seed)?;
        if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
            return Err(RunError::EmptySplit(format!(
                "node split {:?} leaves a set empty",
                config.node_split
            )));
        }
        Ok(Self {
            features: graph.features_or_ones(),
            train_rows: Arc::new(split.train.clone()),
            labels: Arc::new(labels),
            split,
            num_classes,
            lambda_lp: config.lambda_lp,
            graph,
        })
    }

    fn binary(&self) -> bool {
        self.num_classes == 2
    }

    fn score(&self, logits: &Tensor, rows: &[usize]) -> Result<BTreeMap<String, f64>> {
        let all = metrics::argmax_rows(logits);
        let pred: Vec<usize> = rows.iter().map(|&i| all[i]).collect();
        let truth: Vec<usize> = rows.iter().map(|&i| self.labels[i]).collect();
        let mut out = BTreeMap::from([
            ("accuracy".to_string(), metrics::accuracy(&pred, &truth)?),
            ("macro_f1".to_string(), metrics::macro_f1(&pred, &truth)?),
        ]);
        if self.binary() {
            out.insert("f1".to_string(), metrics::binary_f1(&pred, &truth)?);
        }
        Ok(out)
    }

    fn primary(&self, logits: &Tensor, rows: &[usize]) -> Result<f64> {
        Ok(self.score(logits, rows)?[self.metric_name()])
    }
}

impl TaskRun for NcRun {
    fn metric_name(&self) -> &'static str {
        if self.binary() {
            "f1"
        } else {
            "accuracy"
        }
    }

    fn step(&self, model: &Model, rng: &mut ChaCha8Rng, epoch: usize) -> Result<StepOutput> {
        let mut tape = Tape::new();
        let vars = tape.load_params(&model.params);
        let x = tape.constant(self.features.clone());
        let emb = model.encode(&mut tape, &vars, self.graph.csr(), x)?.output();
        let logits = model.node_logits(&mut tape, &vars, emb)?;
        let mut loss = tape.softmax_cross_entropy(logits, self.labels.clone(), self.train_rows.clone())?;
        if self.lambda_lp > 0.0 && self.graph.num_edges() > 0 {
            let pos = self.graph.edges();
            let neg = sample_negatives_with(rng, &self.graph, pos.len(), &HashSet::new())?;
            let lp = model.lp_loss(&mut tape, emb, pos, &neg)?;
            let weighted = tape.scale(lp, self.lambda_lp)?;
            loss = tape.add(loss, weighted)?;
        }
        check_states(model, tape.value(emb), epoch)?;
        let logit_values = tape.value(logits).clone();
        let loss_value = tape.value(loss)[[0, 0]];
        let grads = tape.backward(loss)?;
        Ok(StepOutput {
            loss: loss_value,
            grads,
            train_metric: self.primary(&logit_values, &self.split.train)?,
            val_metric: self.primary(&logit_values, &self.split.val)?,
        })
    }

    fn test(&self, model: &Model) -> Result<BTreeMap<String, f64>> {
        let mut tape = Tape::new();
        let vars = tape.load_params(&model.params);
        let x = tape.constant(self.features.clone());
        let emb = model.encode(&mut tape, &vars, self.graph.csr(), x)?.output();
        let logits = model.node_logits(&mut tape, &vars, emb)?;
        self.score(tape.value(logits), &self.split.test)
    }
}

// ---- graph classification -------------------------------------------------

/// Graphs per tape. Fixed so that results do not depend on the thread count.
const GC_CHUNK: usize = 32;

/// A disjoint union of whole graphs, processed on one tape.
struct Batch {
    features: Tensor,
    csr: Arc<Csr>,
    offsets: Arc<Vec<usize>>,
    labels: Arc<Vec<usize>>,
    rows: Arc<Vec<usize>>,
}

impl Batch {
    fn new(graphs: &[&Graph], feat_dim: usize) -> Result<Self> {
        let total: usize = graphs.iter().map(|g| g.num_nodes()).sum();
        let mut features = Array2::zeros((total, feat_dim));
        let mut edges = Vec::new();
        let mut offsets = vec![0];
        let mut labels = Vec::with_capacity(graphs.len());
        for g in graphs {
            let base = *offsets.last().unwrap();
            if g.num_nodes() == 0 {
                return Err(RunError::Config("empty graph in classification set".into()));
            }
            let f = g.features_or_ones();
            if f.ncols() != feat_dim {
                return Err(RunError::Config(format!("feature width {} != {feat_dim}", f.ncols())));
            }
            features
                .slice_mut(ndarray::s![base..base + g.num_nodes(), ..])
                .assign(&f);
            edges.extend(g.edges().iter().map(|&(u, v)| (u + base, v + base)));
            offsets.push(base + g.num_nodes());
            labels.push(g.graph_label.expect("checked by caller"));
        }
        Ok(Self {
            features,
            csr: Arc::new(Csr::from_edges(total, &edges)),
            offsets: Arc::new(offsets),
            rows: Arc::new((0..labels.len()).collect()),
            labels: Arc::new(labels),
        })
    }

    fn graphs(&self) -> usize {
        self.labels.len()
    }

    /// Records the forward pass and the mean cross-entropy of this batch.
    fn record(&self, model: &Model, tape: &mut Tape) -> Result<(Var, Var, Var)> {
        let vars = tape.load_params(&model.params);
        let x = tape.constant(self.features.clone());
        let emb = model.encode(tape, &vars, &self.csr, x)?.output();
        let logits = model.graph_logits(tape, &vars, emb, self.offsets.clone())?;
        let loss = tape.softmax_cross_entropy(logits, self.labels.clone(), self.rows.clone())?;
        Ok((emb, logits, loss))
    }

    fn predict(&self, model: &Model) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let (_, logits, _) = self.record(model, &mut tape)?;
        Ok(metrics::argmax_rows(tape.value(logits)))
    }
}

struct GcRun {
    train: Vec<Batch>,
    val: Vec<Batch>,
    test: Vec<Batch>,
    num_train: usize,
    feat_dim: usize,
    num_classes: usize,
    threads: usize,
}

/// Worker threads for graph classification, from `HHGCN_THREADS`.
pub fn worker_threads() -> usize {
    std::env::var("HHGCN_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Applies `f` to every item on up to `threads` scoped workers; results keep
/// the input order.
fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let workers = threads.min(items.len());
    let f = &f;
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    (w..items.len())
                        .step_by(workers)
                        .map(|i| (i, f(&items[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every slot filled")).collect()
}

impl GcRun {
    fn new(graphs: Vec<Graph>, config: &TrainConfig, seed: u64) -> Result<Self> {
        if graphs.is_empty() {
            return Err(RunError::EmptySplit("no graphs".into()));
        }
        let labels = graphs
            .iter()
            .enumerate()
            .map(|(i, g)| {
                g.graph_label
                    .ok_or_else(|| RunError::Label(format!("graph {i} has no label")))
            })
            .collect::<Result<Vec<_>>>()?;
        let observed = labels.iter().max().unwrap() + 1;
        let num_classes = match config.num_classes {
            Some(k) if observed > k => {
                return Err(RunError::Label(format!("label {} outside 0..{k}", observed - 1)));
            }
            Some(k) => k,
            None => observed,
        };
        let feat_dim = graphs[0].features_or_ones().ncols();
        let split = stratified_split(&labels, config.dataset.split, seed)?;
        if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
            return Err(RunError::EmptySplit(format!(
                "graph split {:?} leaves a set empty",
                config.dataset.split
            )));
        }
        let batches = |idx: &[usize]| -> Result<Vec<Batch>> {
            idx.chunks(GC_CHUNK)
                .map(|c| Batch::new(&c.iter().map(|&i| &graphs[i]).collect::<Vec<_>>(), feat_dim))
                .collect()
        };
        Ok(Self {
            train: batches(&split.train)?,
            val: batches(&split.val)?,
            test: batches(&split.test)?,
            num_train: split.train.len(),
            feat_dim,
            num_classes,
            threads: worker_threads(),
        })
    }

    fn predict(&self, model: &Model, batches: &[Batch]) -> Result<(Vec<usize>, Vec<usize>)> {
        let preds = par_map(batches, self.threads, |b| b.predict(model));
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for (b, p) in batches.iter().zip(preds) {
            pred.extend(p?);
            truth.extend(b.labels.iter().copied());
        }
        Ok((pred, truth))
    }
}

impl TaskRun for GcRun {
    fn metric_name(&self) -> &'static str {
        "macro_f1"
    }

    fn step(&self, model: &Model, _rng: &mut ChaCha8Rng, epoch: usize) -> Result<StepOutput> {
        let parts = par_map(&self.train, self.threads, |b| -> Result<_> {
            let mut tape = Tape::new();
            let (emb, logits, loss) = b.record(model, &mut tape)?;
            check_states(model, tape.value(emb), epoch)?;
            let pred = metrics::argmax_rows(tape.value(logits));
            let value = tape.value(loss)[[0, 0]];
            Ok((value, tape.backward(loss)?, pred))
        });
        // Chunk losses are means; weight by chunk size for the full-set mean,
        // reducing in chunk order.
        let mut grads = Grads::zeros_like(&model.params);
        let mut loss = 0.0;
        let mut pred = Vec::with_capacity(self.num_train);
        let mut truth = Vec::with_capacity(self.num_train);
        for (b, part) in self.train.iter().zip(parts) {
            let (value, g, p) = part?;
            let w = b.graphs() as f64 / self.num_train as f64;
            loss += w * value;
            grads.accumulate(&g, w);
            pred.extend(p);
            truth.extend(b.labels.iter().copied());
        }
        let (val_pred, val_truth) = self.predict(model, &self.val)?;
        Ok(StepOutput {
            loss,
            grads,
            train_metric: metrics::macro_f1(&pred, &truth)?,
            val_metric: metrics::macro_f1(&val_pred, &val_truth)?,
        })
    }

    fn test(&self, model: &Model) -> Result<BTreeMap<String, f64>> {
        let (pred, truth) = self.predict(model, &self.test)?;
        Ok(BTreeMap::from([
            ("accuracy".to_string(), metrics::accuracy(&pred, &truth)?),
            ("macro_f1".to_string(), metrics::macro_f1(&pred, &truth)?),
        ]))
    }
}
