//! Graphs, file formats, synthetic generators, splits and negative sampling.
//!
//! Edges are undirected and stored canonically as `(u, v)` with `u < v`,
//! sorted and deduplicated. Self-loops are dropped; the closed neighborhood
//! used by aggregation adds the node itself at aggregation time.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("node id {id} out of range for {num_nodes} nodes")]
    NodeOutOfRange { id: usize, num_nodes: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("negative sampling gave up after {attempts} attempts ({found} of {wanted} found)")]
    SamplingCap {
        attempts: usize,
        found: usize,
        wanted: usize,
    },
}

pub type Result<T> = std::result::Result<T, GraphError>;

pub type Edge = (usize, usize);

/// Compressed sparse row adjacency of an undirected graph (both directions
/// stored, neighbor lists sorted).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Csr {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl Csr {
    /// Builds from canonical edges; each edge appears in both endpoint lists.
    pub fn from_edges(num_nodes: usize, edges: &[Edge]) -> Self {
        let mut deg = vec![0usize; num_nodes];
        for &(u, v) in edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        offsets.push(0);
        for d in &deg {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut fill = offsets[..num_nodes].to_vec();
        let mut neighbors = vec![0; offsets[num_nodes]];
        for &(u, v) in edges {
            neighbors[fill[u]] = v;
            fill[u] += 1;
            neighbors[fill[v]] = u;
            fill[v] += 1;
        }
        for i in 0..num_nodes {
            neighbors[offsets[i]..offsets[i + 1]].sort_unstable();
        }
        Self { offsets, neighbors }
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }
}

/// An undirected graph with optional node features and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<Edge>,
    csr: Arc<Csr>,
    pub features: Option<Array2<f64>>,
    pub node_labels: Option<Vec<usize>>,
    pub graph_label: Option<usize>,
}

fn canonical_edges(num_nodes: usize, edges: impl IntoIterator<Item = Edge>) -> Result<Vec<Edge>> {
    let mut out = Vec::new();
    for (u, v) in edges {
        for id in [u, v] {
            if id >= num_nodes {
                return Err(GraphError::NodeOutOfRange { id, num_nodes });
            }
        }
        if u != v {
            out.push((u.min(v), u.max(v)));
        }
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

impl Graph {
    pub fn new(num_nodes: usize, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        let edges = canonical_edges(num_nodes, edges)?;
        let csr = Arc::new(Csr::from_edges(num_nodes, &edges));
        Ok(Self {
            num_nodes,
            edges,
            csr,
            features: None,
            node_labels: None,
            graph_label: None,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn csr(&self) -> &Arc<Csr> {
        &self.csr
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.num_nodes).map(|i| self.csr.degree(i)).collect()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        u < self.num_nodes && v < self.num_nodes && self.csr.has_edge(u, v)
    }

    /// Same nodes, features and labels; a different edge set.
    pub fn with_edges(&self, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        let mut g = Graph::new(self.num_nodes, edges)?;
        g.features = self.features.clone();
        g.node_labels = self.node_labels.clone();
        g.graph_label = self.graph_label;
        Ok(g)
    }

    pub fn feature_dim(&self) -> usize {
        self.features.as_ref().map_or(0, |f| f.ncols())
    }

    /// Features, or a single constant column when none are attached.
    pub fn features_or_ones(&self) -> Array2<f64> {
        self.features
            .clone()
            .unwrap_or_else(|| Array2::ones((self.num_nodes, 1)))
    }

    /// Local clustering coefficient of every node (0 for degree < 2).
    pub fn clustering(&self) -> Vec<f64> {
        (0..self.num_nodes)
            .map(|i| {
                let nb = self.csr.neighbors(i);
                let k = nb.len();
                if k < 2 {
                    return 0.0;
                }
                let mut links = 0usize;
                for (a, &u) in nb.iter().enumerate() {
                    for &v in &nb[a + 1..] {
                        if self.csr.has_edge(u, v) {
                            links += 1;
                        }
                    }
                }
                2.0 * links as f64 / (k * (k - 1)) as f64
            })
            .collect()
    }
}

// ---- file formats -------------------------------------------------------

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_field<T: std::str::FromStr>(tok: Option<&str>, src: &str, line: usize, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| GraphError::Parse {
        path: src.to_string(),
        line,
        msg: format!("missing {what}"),
    })?;
    tok.parse().map_err(|_| GraphError::Parse {
        path: src.to_string(),
        line,
        msg: format!("bad {what} `{tok}`"),
    })
}

/// Parses an edge list: two whitespace-separated ids per line.
pub fn parse_edges(text: &str, src: &str) -> Result<Vec<Edge>> {
    content_lines(text)
        .map(|(line, l)| {
            let mut it = l.split_whitespace();
            let u = parse_field(it.next(), src, line, "source id")?;
            let v = parse_field(it.next(), src, line, "target id")?;
            if it.next().is_some() {
                return Err(GraphError::Parse {
                    path: src.to_string(),
                    line,
                    msg: "expected exactly two ids".into(),
                });
            }
            Ok((u, v))
        })
        .collect()
}

/// Parses `id f1 f2 ...` lines; every row must have the same width.
pub fn parse_features(text: &str, src: &str) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut width = None;
    content_lines(text)
        .map(|(line, l)| {
            let mut it = l.split_whitespace();
            let id = parse_field(it.next(), src, line, "node id")?;
            let vals = it
                .map(|t| parse_field::<f64>(Some(t), src, line, "feature value"))
                .collect::<Result<Vec<_>>>()?;
            if vals.is_empty() || *width.get_or_insert(vals.len()) != vals.len() {
                return Err(GraphError::Parse {
                    path: src.to_string(),
                    line,
                    msg: format!("expected {} feature values, got {}", width.unwrap_or(1), vals.len()),
                });
            }
            Ok((id, vals))
        })
        .collect()
}

/// Parses `id label` lines.
pub fn parse_labels(text: &str, src: &str) -> Result<Vec<(usize, usize)>> {
    content_lines(text)
        .map(|(line, l)| {
            let mut it = l.split_whitespace();
            let id = parse_field(it.next(), src, line, "node id")?;
            let label = parse_field(it.next(), src, line, "label")?;
            Ok((id, label))
        })
        .collect()
}

/// Loads a graph from an edge file and optional feature and label files.
/// The node count is one past the largest id seen in any file.
pub fn load_graph(edge_path: &Path, feature_path: Option<&Path>, label_path: Option<&Path>) -> Result<Graph> {
    let src = edge_path.display().to_string();
    let edges = parse_edges(&read_text(edge_path)?, &src)?;
    let features = match feature_path {
        Some(p) => Some(parse_features(&read_text(p)?, &p.display().to_string())?),
        None => None,
    };
    let labels = match label_path {
        Some(p) => Some(parse_labels(&read_text(p)?, &p.display().to_string())?),
        None => None,
    };
    let max_id = edges
        .iter()
        .flat_map(|&(u, v)| [u, v])
        .chain(features.iter().flatten().map(|(id, _)| *id))
        .chain(labels.iter().flatten().map(|(id, _)| *id))
        .max();
    let num_nodes = max_id.map_or(0, |m| m + 1);
    let mut g = Graph::new(num_nodes, edges)?;
    if let Some(rows) = features {
        let width = rows.first().map_or(0, |r| r.1.len());
        let mut m = Array2::zeros((num_nodes, width));
        for (id, vals) in rows {
            m.row_mut(id).assign(&ndarray::ArrayView1::from(&vals));
        }
        g.features = Some(m);
    }
    if let Some(rows) = labels {
        let mut l = vec![0; num_nodes];
        for (id, label) in rows {
            l[id] = label;
        }
        g.node_labels = Some(l);
    }
    Ok(g)
}

pub fn format_edges(g: &Graph) -> String {
    let mut s = String::new();
    for &(u, v) in &g.edges {
        let _ = writeln!(s, "{u} {v}");
    }
    s
}

pub fn format_features(features: &Array2<f64>) -> String {
    let mut s = String::new();
    for (i, row) in features.rows().into_iter().enumerate() {
        let _ = write!(s, "{i}");
        for v in row {
            let _ = write!(s, " {v}");
        }
        s.push('\n');
    }
    s
}

pub fn format_labels(labels: &[usize]) -> String {
    let mut s = String::new();
    for (i, l) in labels.iter().enumerate() {
        let _ = writeln!(s, "{i} {l}");
    }
    s
}

/// File names used when a graph is written to a directory under `stem`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphFiles {
    pub edges: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub features: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub labels: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub graph_label: Option<usize>,
}

/// Writes `<stem>.edges` and, when present, `<stem>.features` / `<stem>.labels`.
pub fn write_graph(dir: &Path, stem: &str, g: &Graph) -> Result<GraphFiles> {
    let edges = format!("{stem}.edges");
    write_text(&dir.join(&edges), &format_edges(g))?;
    let features = match &g.features {
        Some(f) => {
            let name = format!("{stem}.features");
            write_text(&dir.join(&name), &format_features(f))?;
            Some(name)
        }
        None => None,
    };
    let labels = match &g.node_labels {
        Some(l) => {
            let name = format!("{stem}.labels");
            write_text(&dir.join(&name), &format_labels(l))?;
            Some(name)
        }
        None => None,
    };
    Ok(GraphFiles {
        edges,
        features,
        labels,
        graph_label: g.graph_label,
    })
}

fn load_graph_files(dir: &Path, files: &GraphFiles) -> Result<Graph> {
    let f = files.features.as_ref().map(|p| dir.join(p));
    let l = files.labels.as_ref().map(|p| dir.join(p));
    let mut g = load_graph(&dir.join(&files.edges), f.as_deref(), l.as_deref())?;
    g.graph_label = files.graph_label;
    Ok(g)
}

// ---- dataset specs and manifests ---------------------------------------

/// Noisy balanced tree: a hierarchy with depth-derived labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSpec {
    pub depth: usize,
    pub branching: usize,
    /// Extra uniformly random edges, as a fraction of the tree's edge count.
    #[serde(default)]
    pub noise_edges: f64,
    /// Standard deviation of the Gaussian feature noise at depth 1.
    #[serde(default = "default_feature_noise")]
    pub feature_noise: f64,
    /// Width of the Gaussian noise block appended to the one-hot depth.
    #[serde(default = "default_noise_dim")]
    pub noise_dim: usize,
}

fn default_feature_noise() -> f64 {
    1.0
}

fn default_noise_dim() -> usize {
    8
}

impl TreeSpec {
    pub fn new(depth: usize, branching: usize, noise_edges: f64) -> Self {
        Self {
            depth,
            branching,
            noise_edges,
            feature_noise: default_feature_noise(),
            noise_dim: default_noise_dim(),
        }
    }
}

/// Random-graph kinds for the synthetic classification set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    ErdosRenyi,
    BarabasiAlbert,
    WattsStrogatz,
}

impl GraphKind {
    pub const ALL: [GraphKind; 3] = [
        GraphKind::ErdosRenyi,
        GraphKind::BarabasiAlbert,
        GraphKind::WattsStrogatz,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassificationSpec {
    #[serde(default = "default_kinds")]
    pub kinds: Vec<GraphKind>,
    pub count_per_class: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    #[serde(default = "default_er_p")]
    pub er_p: f64,
    #[serde(default = "default_ba_m")]
    pub ba_m: usize,
    #[serde(default = "default_ws_k")]
    pub ws_k: usize,
    #[serde(default = "default_ws_beta")]
    pub ws_beta: f64,
}

fn default_kinds() -> Vec<GraphKind> {
    GraphKind::ALL.to_vec()
}
fn default_er_p() -> f64 {
    0.1
}
fn default_ba_m() -> usize {
    2
}
fn default_ws_k() -> usize {
    4
}
fn default_ws_beta() -> f64 {
    0.1
}

impl ClassificationSpec {
    pub fn new(count_per_class: usize, min_nodes: usize, max_nodes: usize) -> Self {
        Self {
            kinds: default_kinds(),
            count_per_class,
            min_nodes,
            max_nodes,
            er_p: default_er_p(),
            ba_m: default_ba_m(),
            ws_k: default_ws_k(),
            ws_beta: default_ws_beta(),
        }
    }
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Tree(TreeSpec),
    Classification(ClassificationSpec),
    /// A single graph on disk.
    Files {
        edges: PathBuf,
        #[serde(default)]
        features: Option<PathBuf>,
        #[serde(default)]
        labels: Option<PathBuf>,
    },
    /// A directory written by [`write_dataset`].
    Directory {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DatasetSource,
    #[serde(default)]
    pub seed: u64,
    /// Train / validation / test fractions; must sum to 1.
    #[serde(default = "default_fractions")]
    pub split: [f64; 3],
}

fn default_fractions() -> [f64; 3] {
    [0.85, 0.05, 0.10]
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.split.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.split.iter().any(|f| *f < 0.0) {
            return Err(GraphError::Invalid(format!(
                "split fractions {:?} must be non-negative and sum to 1",
                self.split
            )));
        }
        Ok(())
    }
}

/// A materialized dataset: one graph, or a labeled set of graphs.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Single(Graph),
    Collection(Vec<Graph>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: DatasetSource,
    pub seed: u64,
    pub graphs: Vec<GraphFiles>,
}

pub fn materialize(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    Ok(match &spec.source {
        DatasetSource::Tree(t) => Dataset::Single(generate_tree(t, spec.seed)?),
        DatasetSource::Classification(c) => Dataset::Collection(generate_classification_set(c, spec.seed)?),
        DatasetSource::Files {
            edges,
            features,
            labels,
        } => Dataset::Single(load_graph(edges, features.as_deref(), labels.as_deref())?),
        DatasetSource::Directory { path } => read_dataset(path)?,
    })
}

/// Writes every graph plus `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, source: &DatasetSource, seed: u64, data: &Dataset) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|source| GraphError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let graphs = match data {
        Dataset::Single(g) => vec![write_graph(dir, "graph", g)?],
        Dataset::Collection(gs) => gs
            .iter()
            .enumerate()
            .map(|(i, g)| write_graph(dir, &format!("graph_{i:05}"), g))
            .collect::<Result<_>>()?,
    };
    let manifest = Manifest {
        generator: source.clone(),
        seed,
        graphs,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_text(&dir.join("manifest.json"), &(json + "\n"))?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&read_text(&path)?).map_err(|e| GraphError::Parse {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let graphs = manifest
        .graphs
        .iter()
        .map(|f| load_graph_files(dir, f))
        .collect::<Result<Vec<_>>>()?;
    Ok(match manifest.generator {
        DatasetSource::Classification(_) => Dataset::Collection(graphs),
        _ if graphs.len() == 1 => Dataset::Single(graphs.into_iter().next().unwrap()),
        _ => Dataset::Collection(graphs),
    })
}

// ---- negative sampling and splits ---------------------------------------

fn canon(u: usize, v: usize) -> Edge {
    (u.min(v), u.max(v))
}

/// Draws `k` uniform non-edges (with replacement) that avoid `exclude`.
pub fn sample_negatives_with<R: Rng>(rng: &mut R, g: &Graph, k: usize, exclude: &HashSet<Edge>) -> Result<Vec<Edge>> {
    sample_non_edges(rng, g, k, exclude, false)
}

/// Seeded form of [`sample_negatives_with`].
pub fn sample_negatives(g: &Graph, k: usize, seed: u64, exclude: &HashSet<Edge>) -> Result<Vec<Edge>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_non_edges(&mut rng, g, k, exclude, false)
}

fn sample_non_edges<R: Rng>(
    rng: &mut R,
    g: &Graph,
    k: usize,
    exclude: &HashSet<Edge>,
    distinct: bool,
) -> Result<Vec<Edge>> {
    let n = g.num_nodes();
    if k == 0 {
        return Ok(Vec::new());
    }
    if n < 2 {
        return Err(GraphError::Invalid("need at least two nodes to sample pairs".into()));
    }
    let cap = 1000 + 200 * k;
    let mut out = Vec::with_capacity(k);
    let mut seen = HashSet::new();
    let mut attempts = 0;
    while out.len() < k {
        if attempts >= cap {
            return Err(GraphError::SamplingCap {
                attempts,
                found: out.len(),
                wanted: k,
            });
        }
        attempts += 1;
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u == v {
            continue;
        }
        let e = canon(u, v);
        if g.has_edge(e.0, e.1) || exclude.contains(&e) || (distinct && !seen.insert(e)) {
            continue;
        }
        out.push(e);
    }
    Ok(out)
}

/// Link-prediction supervision sets.
#[derive(Debug, Clone, PartialEq)]
pub struct LpSplit {
    /// Message-passing graph containing only the training positives.
    pub train_graph: Graph,
    pub train_pos: Vec<Edge>,
    pub val_pos: Vec<Edge>,
    pub val_neg: Vec<Edge>,
    pub test_pos: Vec<Edge>,
    pub test_neg: Vec<Edge>,
}

fn split_counts(total: usize, fractions: [f64; 3]) -> [usize; 3] {
    let val = (fractions[1] * total as f64).round() as usize;
    let test = (fractions[2] * total as f64).round() as usize;
    let val = val.min(total);
    let test = test.min(total - val);
    [total - val - test, val, test]
}

/// Uniformly holds out validation and test edges and draws equally many
/// distinct non-edges for each held-out set.
pub fn make_lp_split(g: &Graph, fractions: [f64; 3], seed: u64) -> Result<LpSplit> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(GraphError::Invalid(format!("fractions {fractions:?} do not sum to 1")));
    }
    let [n_train, n_val, n_test] = split_counts(g.num_edges(), fractions);
    if g.num_edges() < 3 || (fractions[0] > 0.0 && n_train == 0) {
        return Err(GraphError::Invalid(format!(
            "graph with {} edges is too small for split {fractions:?}",
            g.num_edges()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = g.edges().to_vec();
    edges.shuffle(&mut rng);
    let mut test_pos = edges[n_train + n_val..].to_vec();
    let mut val_pos = edges[n_train..n_train + n_val].to_vec();
    let mut train_pos = edges[..n_train].to_vec();
    train_pos.sort_unstable();
    val_pos.sort_unstable();
    test_pos.sort_unstable();

    let mut exclude = HashSet::new();
    let val_neg = sample_non_edges(&mut rng, g, n_val, &exclude, true)?;
    exclude.extend(val_neg.iter().copied());
    let test_neg = sample_non_edges(&mut rng, g, n_test, &exclude, true)?;
    debug_assert_eq!(n_train, train_pos.len());
    Ok(LpSplit {
        train_graph: g.with_edges(train_pos.iter().copied())?,
        train_pos,
        val_pos,
        val_neg,
        test_pos,
        test_neg,
    })
}

/// Index sets for transductive node classification or graph classification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified split of item indices by label.
pub fn stratified_split(labels: &[usize], fractions: [f64; 3], seed: u64) -> Result<IndexSplit> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(GraphError::Invalid(format!("fractions {fractions:?} do not sum to 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut split = IndexSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let [n_train, n_val, _] = split_counts(idx.len(), fractions);
        split.train.extend_from_slice(&idx[..n_train]);
        split.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        split.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

// ---- generators ---------------------------------------------------------

/// Balanced tree plus `noise_edges * |E|` uniform extra edges.
///
/// Features are the one-hot depth followed by a `noise_dim` Gaussian block
/// that is inherited down the tree: a child's block is its parent's block
/// plus fresh noise whose scale halves at every level. Node labels are 1 for
/// nodes deeper than `depth / 2`.
pub fn generate_tree(spec: &TreeSpec, seed: u64) -> Result<Graph> {
    if spec.depth == 0 || spec.branching == 0 {
        return Err(GraphError::Invalid("tree needs depth >= 1 and branching >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut depth_of = vec![0usize];
    let mut parent = vec![usize::MAX];
    let mut edges = Vec::new();
    let mut frontier = vec![0usize];
    for d in 1..=spec.depth {
        let mut next = Vec::with_capacity(frontier.len() * spec.branching);
        for &p in &frontier {
            for _ in 0..spec.branching {
                let c = depth_of.len();
                depth_of.push(d);
                parent.push(p);
                edges.push((p, c));
                next.push(c);
            }
        }
        frontier = next;
    }
    let n = depth_of.len();
    let tree_edges = edges.len();
    let mut present: HashSet<Edge> = edges.iter().copied().collect();
    let extra = (spec.noise_edges * tree_edges as f64).round() as usize;
    let max_pairs = n * (n - 1) / 2;
    if tree_edges + extra > max_pairs {
        return Err(GraphError::Invalid("too many noise edges for this tree".into()));
    }
    let mut added = 0;
    while added < extra {
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u != v && present.insert(canon(u, v)) {
            edges.push(canon(u, v));
            added += 1;
        }
    }

    let width = spec.depth + 1 + spec.noise_dim;
    let mut features = Array2::zeros((n, width));
    for i in 0..n {
        let d = depth_of[i];
        features[[i, d]] = 1.0;
        if spec.noise_dim > 0 && i > 0 {
            let scale = spec.feature_noise * 0.5f64.powi(d as i32 - 1);
            for c in 0..spec.noise_dim {
                let z: f64 = rng.sample(StandardNormal);
                let col = spec.depth + 1 + c;
                features[[i, col]] = features[[parent[i], col]] + scale * z;
            }
        }
    }
    let labels = depth_of.iter().map(|&d| usize::from(d > spec.depth / 2)).collect();
    let mut g = Graph::new(n, edges)?;
    g.features = Some(features);
    g.node_labels = Some(labels);
    Ok(g)
}

/// Erdős–Rényi G(n, p).
pub fn erdos_renyi<R: Rng>(rng: &mut R, n: usize, p: f64) -> Graph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    Graph::new(n, edges).expect("ids in range")
}

/// Barabási–Albert preferential attachment: a clique on `m + 1` seed nodes,
/// then each new node attaches to `m` distinct existing nodes with
/// probability proportional to degree.
pub fn barabasi_albert<R: Rng>(rng: &mut R, n: usize, m: usize) -> Graph {
    let m = m.max(1);
    let seed_nodes = (m + 1).min(n);
    let mut edges = Vec::new();
    let mut endpoints = Vec::new();
    for u in 0..seed_nodes {
        for v in u + 1..seed_nodes {
            edges.push((u, v));
            endpoints.push(u);
            endpoints.push(v);
        }
    }
    for new in seed_nodes..n {
        let mut targets: Vec<usize> = Vec::with_capacity(m);
        while targets.len() < m {
            let t = endpoints[rng.random_range(0..endpoints.len())];
            if !targets.contains(&t) {
                targets.push(t);
            }
        }
        for t in targets {
            edges.push((t, new));
            endpoints.push(t);
            endpoints.push(new);
        }
    }
    Graph::new(n, edges).expect("ids in range")
}

/// Watts–Strogatz: ring lattice with `k` neighbors per node (k even), each
/// edge's far endpoint rewired with probability `beta`.
pub fn watts_strogatz<R: Rng>(rng: &mut R, n: usize, k: usize, beta: f64) -> Graph {
    let half = k / 2;
    let mut present: HashSet<Edge> = HashSet::new();
    let mut lattice = Vec::new();
    for u in 0..n {
        for j in 1..=half {
            let e = canon(u, (u + j) % n);
            if e.0 != e.1 && present.insert(e) {
                lattice.push((u, (u + j) % n));
            }
        }
    }
    let mut edges = Vec::with_capacity(lattice.len());
    for (u, v) in lattice {
        if beta > 0.0 && rng.random::<f64>() < beta {
            // Rewire (u, v) to (u, w) when a free target exists.
            let free = (0..n).filter(|&w| w != u && !present.contains(&canon(u, w))).count();
            if free > 0 {
                let w = loop {
                    let w = rng.random_range(0..n);
                    if w != u && !present.contains(&canon(u, w)) {
                        break w;
                    }
                };
                present.remove(&canon(u, v));
                present.insert(canon(u, w));
                edges.push(canon(u, w));
                continue;
            }
        }
        edges.push(canon(u, v));
    }
    edges.retain(|e| present.contains(e));
    Graph::new(n, edges).expect("ids in range")
}

/// Attaches the 2-d structural features `[degree / (n - 1), clustering]`.
pub fn attach_structural_features(g: &mut Graph) {
    let n = g.num_nodes();
    let denom = (n.max(2) - 1) as f64;
    let deg = g.degrees();
    let clust = g.clustering();
    let mut f = Array2::zeros((n, 2));
    for i in 0..n {
        f[[i, 0]] = deg[i] as f64 / denom;
        f[[i, 1]] = clust[i];
    }
    g.features = Some(f);
}

/// Labeled random graphs, `count_per_class` of each kind, with the class
/// label equal to the kind's index in `spec.kinds`.
pub fn generate_classification_set(spec: &ClassificationSpec, seed: u64) -> Result<Vec<Graph>> {
    if spec.count_per_class == 0 || spec.kinds.is_empty() {
        return Err(GraphError::Invalid("need at least one graph per class".into()));
    }
    if spec.min_nodes < 2 || spec.min_nodes > spec.max_nodes {
        return Err(GraphError::Invalid(format!(
            "bad size range {}..={}",
            spec.min_nodes, spec.max_nodes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.kinds.len() * spec.count_per_class);
    for (label, kind) in spec.kinds.iter().enumerate() {
        for _ in 0..spec.count_per_class {
            let n = rng.random_range(spec.min_nodes..=spec.max_nodes);
            let mut g = match kind {
                GraphKind::ErdosRenyi => erdos_renyi(&mut rng, n, spec.er_p),
                GraphKind::BarabasiAlbert => barabasi_albert(&mut rng, n, spec.ba_m),
                GraphKind::WattsStrogatz => watts_strogatz(&mut rng, n, spec.ws_k, spec.ws_beta),
            };
            attach_structural_features(&mut g);
            g.graph_label = Some(label);
            out.push(g);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_graph_from_text() {
        let edges = parse_edges("# comment\n0 1\n1 2\n", "mem").unwrap();
        let g = Graph::new(3, edges).unwrap();
        assert_eq!(g.degrees(), vec![1, 2, 1]);
        assert_eq!(g.csr().neighbors(1), &[0, 2]);
    }

    #[test]
    fn duplicates_and_self_loops_collapse() {
        let g = Graph::new(3, [(0, 1), (1, 0), (0, 1), (2, 2)]).unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
        assert_eq!(g.degrees(), vec![1, 1, 0]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse_edges("0 1\n1 x\n", "e.txt").unwrap_err();
        match err {
            GraphError::Parse { line, path, .. } => {
                assert_eq!(line, 2);
                assert_eq!(path, "e.txt");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_edges("0 1 2\n", "e").is_err());
        assert!(parse_features("0 1.0 2.0\n1 3.0\n", "f").is_err());
        assert!(matches!(
            Graph::new(2, [(0, 5)]),
            Err(GraphError::NodeOutOfRange { id: 5, num_nodes: 2 })
        ));
    }

    #[test]
    fn tree_sizes() {
        let g = generate_tree(&TreeSpec::new(2, 2, 0.0), 0).unwrap();
        assert_eq!(g.num_nodes(), 7);
        assert_eq!(g.num_edges(), 6);
        let labels = g.node_labels.as_ref().unwrap();
        assert_eq!(labels, &vec![0, 0, 0, 1, 1, 1, 1]);
        let f = g.features.as_ref().unwrap();
        assert_eq!(f.ncols(), 3 + 8);
        assert_eq!(f[[0, 0]], 1.0);
        assert_eq!(f[[3, 2]], 1.0);
    }

    #[test]
    fn noisy_tree_edge_count() {
        let g = generate_tree(&TreeSpec::new(6, 3, 0.05), 3).unwrap();
        assert_eq!(g.num_nodes(), 1093);
        assert_eq!(g.num_edges(), 1092 + 55);
    }

    #[test]
    fn complete_minus_one_edge() {
        let mut edges = Vec::new();
        for u in 0..6 {
            for v in u + 1..6 {
                if (u, v) != (2, 4) {
                    edges.push((u, v));
                }
            }
        }
        let g = Graph::new(6, edges).unwrap();
        let neg = sample_negatives(&g, 1, 9, &HashSet::new()).unwrap();
        assert_eq!(neg, vec![(2, 4)]);
        let mut ex = HashSet::new();
        ex.insert((2, 4));
        assert!(matches!(
            sample_negatives(&g, 1, 9, &ex),
            Err(GraphError::SamplingCap { .. })
        ));
    }

    #[test]
    fn split_with_everything_in_train() {
        let g = generate_tree(&TreeSpec::new(3, 2, 0.0), 1).unwrap();
        let s = make_lp_split(&g, [1.0, 0.0, 0.0], 4).unwrap();
        assert_eq!(s.train_pos.len(), g.num_edges());
        assert!(s.val_pos.is_empty() && s.test_pos.is_empty());
        assert!(s.val_neg.is_empty() && s.test_neg.is_empty());
        assert!(make_lp_split(&Graph::new(3, [(0, 1)]).unwrap(), [0.85, 0.05, 0.1], 0).is_err());
    }

    #[test]
    fn stratified_split_keeps_classes() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let s = stratified_split(&labels, [0.3, 0.2, 0.5], 5).unwrap();
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 100);
        for c in 0..4 {
            let count = |set: &[usize]| set.iter().filter(|&&i| labels[i] == c).count();
            // 25 per class: val 5, test round(12.5) = 13, train takes the rest
            assert_eq!((count(&s.train), count(&s.val), count(&s.test)), (7, 5, 13));
        }
    }

    #[test]
    fn clustering_of_triangle_and_star() {
        let tri = Graph::new(3, [(0, 1), (1, 2), (0, 2)]).unwrap();
        assert_eq!(tri.clustering(), vec![1.0, 1.0, 1.0]);
        let star = Graph::new(4, [(0, 1), (0, 2), (0, 3)]).unwrap();
        assert_eq!(star.clustering(), vec![0.0; 4]);
    }
}
