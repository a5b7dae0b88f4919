//! Contrastive alignment of graph-structure and flow-feature embeddings.
//!
//! Both encoders are frozen and deterministic: node features are hashed into
//! a fixed-width vector and smoothed over the graph by mean-neighbour
//! aggregation (structure side), or embedded per feature dimension as a
//! token-hash bag (RD) or a sign-aware length histogram (PL). Only the
//! per-dimension affine projectors are trained, by gradient descent on the
//! symmetric cross-entropy over the scaled similarity matrix
//!
//! ```text
//! S_i = g_i1(norm(H)) . g_i2(norm(N_i))^T . exp(tau)
//! L   = sum_i 1/2 * lambda_i * (CE(S_i, y) + CE(S_i^T, y)),  y = (0, 1, .., n-1)
//! ```
//!
//! A linear task head over the mean projected graph embedding stands in for
//! a language model when classifying whole graphs.

use std::fmt;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::mix64;
use crate::trg::{TrafficRelationGraph, TrgNode};

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("every training graph has a single node; nothing to align")]
    Degenerate,
    #[error("invalid alignment config: {0}")]
    InvalidConfig(String),
    #[error("parameters carry no task head")]
    NoTaskHead,
    #[error("no labelled graphs to fit the task head")]
    NoLabels,
}

/// Flow feature granularity aligned against the graph encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureDim {
    /// Raw datagram byte-pair tokens.
    #[serde(rename = "RD")]
    Rd,
    /// Directed packet lengths.
    #[serde(rename = "PL")]
    Pl,
}

impl fmt::Display for FeatureDim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureDim::Rd => "RD",
            FeatureDim::Pl => "PL",
        })
    }
}

/// `n x d` matrix of per-node (or per-flow) embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(pub Array2<f64>);

impl EmbeddingMatrix {
    pub fn rows(&self) -> usize {
        self.0.nrows()
    }
    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

// ---------------------------------------------------------------- encoders

const HASH_SEED: u64 = 0x5eed_f00d_cafe_b0ba;
const RD_TAG: u64 = 0x0052_4400;
const PL_TAG: u64 = 0x0050_4c00;
/// Lengths at or beyond this fall in the last histogram bin.
const PL_HIST_MAX: u64 = 1600;

fn hashed_slot(tag: u64, value: u64, dim: usize) -> (usize, f64) {
    let h = mix64(HASH_SEED ^ mix64(tag ^ value));
    let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
    ((h % dim as u64) as usize, sign)
}

/// Signed feature hash of a node's tokens and directed lengths.
pub fn node_feature_hash(node: &TrgNode, dim: usize) -> Array1<f64> {
    let mut v = Array1::zeros(dim);
    for &t in &node.datagram_tokens {
        let (slot, sign) = hashed_slot(RD_TAG, u64::from(t), dim);
        v[slot] += sign;
    }
    for &l in &node.directed_lengths {
        let (slot, sign) = hashed_slot(PL_TAG, l as u64, dim);
        v[slot] += sign;
    }
    v
}

/// `rounds` synchronous updates `h <- (h + mean(neighbour h)) / 2`.
/// Nodes without neighbours keep their vector.
pub fn aggregate_neighbors(initial: &Array2<f64>, neighbors: &[Vec<usize>], rounds: usize) -> Array2<f64> {
    let mut h = initial.clone();
    for _ in 0..rounds {
        let mut next = h.clone();
        for (i, nbrs) in neighbors.iter().enumerate() {
            if nbrs.is_empty() {
                continue;
            }
            let mut mean = Array1::<f64>::zeros(h.ncols());
            for &j in nbrs {
                mean += &h.row(j);
            }
            mean /= nbrs.len() as f64;
            let mut row = next.row_mut(i);
            row += &mean;
            row *= 0.5;
        }
        h = next;
    }
    h
}

/// Structure-level graph encoder.
pub trait GraphEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, g: &TrafficRelationGraph) -> Result<EmbeddingMatrix, AlignError>;
}

/// Per-flow feature encoder for one feature dimension.
pub trait FlowEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, flows: &[TrgNode], which: FeatureDim) -> EmbeddingMatrix;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub graph_dim: usize,
    pub flow_dim: usize,
    pub rounds: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            graph_dim: 64,
            flow_dim: 64,
            rounds: 2,
        }
    }
}

/// Feature hash plus mean-neighbour aggregation; no trainable state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashGraphEncoder {
    pub dim: usize,
    pub rounds: usize,
}

impl GraphEncoder for HashGraphEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, g: &TrafficRelationGraph) -> Result<EmbeddingMatrix, AlignError> {
        if g.nodes.is_empty() {
            return Err(AlignError::EmptyGraph);
        }
        let mut x = Array2::zeros((g.nodes.len(), self.dim));
        for (i, node) in g.nodes.iter().enumerate() {
            x.row_mut(i).assign(&node_feature_hash(node, self.dim));
        }
        Ok(EmbeddingMatrix(aggregate_neighbors(&x, &g.neighbors(), self.rounds)))
    }
}

/// Token-hash bag for RD, sign-aware length histogram for PL.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashFlowEncoder {
    pub dim: usize,
}

impl FlowEncoder for HashFlowEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, flows: &[TrgNode], which: FeatureDim) -> EmbeddingMatrix {
        let mut out = Array2::zeros((flows.len(), self.dim));
        for (i, f) in flows.iter().enumerate() {
            let mut row = out.row_mut(i);
            match which {
                FeatureDim::Rd => {
                    for &t in &f.datagram_tokens {
                        let (slot, sign) = hashed_slot(RD_TAG ^ 0xff, u64::from(t), self.dim);
                        row[slot] += sign;
                    }
                }
                FeatureDim::Pl => {
                    let half = (self.dim / 2).max(1);
                    for &l in &f.directed_lengths {
                        let mag = l.unsigned_abs().min(PL_HIST_MAX - 1);
                        let bin = (mag * half as u64 / PL_HIST_MAX) as usize;
                        let slot = if l >= 0 { bin } else { (half + bin).min(self.dim - 1) };
                        row[slot] += 1.0;
                    }
                }
            }
        }
        EmbeddingMatrix(out)
    }
}

/// Default frozen encoder pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Encoders {
    pub graph: HashGraphEncoder,
    pub flow: HashFlowEncoder,
}

impl Encoders {
    pub fn new(cfg: &EncoderConfig) -> Self {
        Encoders {
            graph: HashGraphEncoder {
                dim: cfg.graph_dim,
                rounds: cfg.rounds,
            },
            flow: HashFlowEncoder { dim: cfg.flow_dim },
        }
    }
}

impl Default for Encoders {
    fn default() -> Self {
        Encoders::new(&EncoderConfig::default())
    }
}

/// Graph encoding with the default width.
pub fn encode_graph(g: &TrafficRelationGraph, rounds: usize) -> Result<EmbeddingMatrix, AlignError> {
    HashGraphEncoder {
        dim: EncoderConfig::default().graph_dim,
        rounds,
    }
    .encode(g)
}

/// Flow encoding with the default width.
pub fn encode_flows(flows: &[TrgNode], which: FeatureDim) -> EmbeddingMatrix {
    HashFlowEncoder {
        dim: EncoderConfig::default().flow_dim,
    }
    .encode(flows, which)
}

// ------------------------------------------------------------- projectors

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentConfig {
    /// Similarities are scaled by `exp(tau)`.
    pub tau: f64,
    pub dims: Vec<FeatureDim>,
    /// One non-negative weight per entry of `dims`.
    pub lambda: Vec<f64>,
    pub proj_dim: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            tau: 0.0,
            dims: vec![FeatureDim::Rd, FeatureDim::Pl],
            lambda: vec![1.0, 1.0],
            proj_dim: 32,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<(), AlignError> {
        let bad = |m: &str| Err(AlignError::InvalidConfig(m.to_string()));
        if self.dims.is_empty() {
            return bad("dims: at least one feature dimension required");
        }
        if self.lambda.len() != self.dims.len() {
            return bad("lambda: one weight per entry of dims required");
        }
        if self.lambda.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return bad("lambda: weights must be finite and non-negative");
        }
        if self.lambda.iter().sum::<f64>() <= 0.0 {
            return bad("lambda: weights must not all be zero");
        }
        if self.proj_dim == 0 {
            return bad("proj_dim: must be at least 1");
        }
        if !self.tau.is_finite() {
            return bad("tau: must be finite");
        }
        Ok(())
    }
}

/// `y = x W^T + b` applied row-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    /// `out x in`, row-major.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl AffineMap {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        AffineMap {
            weight: Array2::zeros((d_out, d_in)),
            bias: Array1::zeros(d_out),
        }
    }

    /// Uniform in `[-1/sqrt(d_in), 1/sqrt(d_in)]`.
    pub fn init<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        AffineMap {
            weight: Array2::from_shape_simple_fn((d_out, d_in), || rng.gen_range(-bound..=bound)),
            bias: Array1::from_shape_simple_fn(d_out, || rng.gen_range(-bound..=bound)),
        }
    }

    /// Identity on the first `min(d_in, d_out)` coordinates, zero bias.
    pub fn identity(d_in: usize, d_out: usize) -> Self {
        let mut m = Self::zeros(d_in, d_out);
        for i in 0..d_in.min(d_out) {
            m.weight[[i, i]] = 1.0;
        }
        m
    }

    pub fn d_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    fn apply_vec(&self, x: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(x) + &self.bias
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }

    fn is_finite(&self) -> bool {
        self.params().all(|v| v.is_finite())
    }
}

/// The pair of projectors for one feature dimension: `graph` maps the
/// structure encoding, `flow` maps the flow encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimProjector {
    pub dim: FeatureDim,
    pub graph: AffineMap,
    pub flow: AffineMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    pub classes: Vec<String>,
    pub map: AffineMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorParams {
    pub projectors: Vec<DimProjector>,
    #[serde(default)]
    pub head: Option<TaskHead>,
}

impl ProjectorParams {
    pub fn init(cfg: &AlignmentConfig, d_graph: usize, d_flow: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projectors = cfg
            .dims
            .iter()
            .map(|&dim| DimProjector {
                dim,
                graph: AffineMap::init(d_graph, cfg.proj_dim, &mut rng),
                flow: AffineMap::init(d_flow, cfg.proj_dim, &mut rng),
            })
            .collect();
        ProjectorParams {
            projectors,
            head: None,
        }
    }

    /// Zero-valued parameters with the same shapes, head excluded.
    pub fn zeros_like(&self) -> Self {
        ProjectorParams {
            projectors: self
                .projectors
                .iter()
                .map(|p| DimProjector {
                    dim: p.dim,
                    graph: AffineMap::zeros(p.graph.d_in(), p.graph.d_out()),
                    flow: AffineMap::zeros(p.flow.d_in(), p.flow.d_out()),
                })
                .collect(),
            head: None,
        }
    }

    pub fn projector(&self, dim: FeatureDim) -> Option<&DimProjector> {
        self.projectors.iter().find(|p| p.dim == dim)
    }

    /// Projector weights and biases in a fixed order (head excluded).
    pub fn flat(&self) -> Vec<f64> {
        self.projectors
            .iter()
            .flat_map(|p| p.graph.params().chain(p.flow.params()))
            .copied()
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        let mut it = values.iter();
        for p in &mut self.projectors {
            for slot in p.graph.params_mut().chain(p.flow.params_mut()) {
                *slot = *it.next().expect("flat parameter vector too short");
            }
        }
        assert!(it.next().is_none(), "flat parameter vector too long");
    }

    pub fn is_finite(&self) -> bool {
        self.projectors.iter().all(|p| p.graph.is_finite() && p.flow.is_finite())
            && self.head.as_ref().map_or(true, |h| h.map.is_finite())
    }

    fn axpy(&mut self, alpha: f64, other: &ProjectorParams) {
        for (p, q) in self.projectors.iter_mut().zip(&other.projectors) {
            p.graph.weight.scaled_add(alpha, &q.graph.weight);
            p.graph.bias.scaled_add(alpha, &q.graph.bias);
            p.flow.weight.scaled_add(alpha, &q.flow.weight);
            p.flow.bias.scaled_add(alpha, &q.flow.bias);
        }
    }
}

// ------------------------------------------------------------ similarities

/// Row-wise L2 normalization; all-zero rows stay zero.
pub fn l2_normalize_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    out
}

/// Scaled similarity between projected graph and flow embeddings for one
/// dimension.
pub fn similarity_matrix(
    h: &EmbeddingMatrix,
    n: &EmbeddingMatrix,
    params: &ProjectorParams,
    cfg: &AlignmentConfig,
    dim: FeatureDim,
) -> Result<Array2<f64>, AlignError> {
    let proj = params
        .projector(dim)
        .ok_or_else(|| AlignError::ShapeMismatch(format!("no projector for {dim}")))?;
    check_shapes(h, n, proj)?;
    Ok(similarity_with(h, n, proj, cfg.tau).0)
}

fn check_shapes(h: &EmbeddingMatrix, n: &EmbeddingMatrix, proj: &DimProjector) -> Result<(), AlignError> {
    if h.rows() != n.rows() {
        return Err(AlignError::ShapeMismatch(format!(
            "{} graph rows vs {} flow rows",
            h.rows(),
            n.rows()
        )));
    }
    if h.dim() != proj.graph.d_in() || n.dim() != proj.flow.d_in() {
        return Err(AlignError::ShapeMismatch(format!(
            "embedding widths ({}, {}) vs projector inputs ({}, {})",
            h.dim(),
            n.dim(),
            proj.graph.d_in(),
            proj.flow.d_in()
        )));
    }
    Ok(())
}

struct Forward {
    a: Array2<f64>,
    b: Array2<f64>,
    p: Array2<f64>,
    q: Array2<f64>,
}

fn similarity_with(h: &EmbeddingMatrix, n: &EmbeddingMatrix, proj: &DimProjector, tau: f64) -> (Array2<f64>, Forward) {
    let a = l2_normalize_rows(&h.0);
    let b = l2_normalize_rows(&n.0);
    let p = proj.graph.apply(&a);
    let q = proj.flow.apply(&b);
    let s = p.dot(&q.t()) * tau.exp();
    (s, Forward { a, b, p, q })
}

/// Mean over rows of softmax cross-entropy with the diagonal as target.
pub fn diagonal_cross_entropy(s: &Array2<f64>) -> f64 {
    let n = s.nrows();
    let mut total = 0.0;
    for (i, row) in s.rows().into_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[i];
    }
    total / n as f64
}

/// Weighted symmetric cross-entropy over one similarity matrix per dimension.
pub fn alignment_loss(similarities: &[Array2<f64>], cfg: &AlignmentConfig) -> f64 {
    similarities
        .iter()
        .zip(&cfg.lambda)
        .map(|(s, &lambda)| {
            0.5 * lambda * (diagonal_cross_entropy(s) + diagonal_cross_entropy(&s.t().to_owned()))
        })
        .sum()
}

fn row_softmax(s: &Array2<f64>) -> Array2<f64> {
    let mut out = s.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Frozen encodings of one graph: the structure view and one flow view per
/// configured dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignBatch {
    pub h: EmbeddingMatrix,
    pub n: Vec<EmbeddingMatrix>,
}

impl AlignBatch {
    pub fn from_graph(
        g: &TrafficRelationGraph,
        enc: &Encoders,
        cfg: &AlignmentConfig,
    ) -> Result<Self, AlignError> {
        let h = enc.graph.encode(g)?;
        let n = cfg.dims.iter().map(|&d| enc.flow.encode(&g.nodes, d)).collect();
        Ok(AlignBatch { h, n })
    }

    pub fn rows(&self) -> usize {
        self.h.rows()
    }
}

fn batch_forward(
    params: &ProjectorParams,
    batch: &AlignBatch,
    cfg: &AlignmentConfig,
) -> Result<Vec<(Array2<f64>, Forward)>, AlignError> {
    if batch.n.len() != cfg.dims.len() || params.projectors.len() != cfg.dims.len() {
        return Err(AlignError::ShapeMismatch(
            "dimension count differs between config, batch and params".into(),
        ));
    }
    cfg.dims
        .iter()
        .zip(&batch.n)
        .map(|(&dim, n)| {
            let proj = params
                .projector(dim)
                .ok_or_else(|| AlignError::ShapeMismatch(format!("no projector for {dim}")))?;
            check_shapes(&batch.h, n, proj)?;
            Ok(similarity_with(&batch.h, n, proj, cfg.tau))
        })
        .collect()
}

/// Alignment loss of one batch under the given parameters.
pub fn batch_loss(params: &ProjectorParams, batch: &AlignBatch, cfg: &AlignmentConfig) -> Result<f64, AlignError> {
    let sims: Vec<Array2<f64>> = batch_forward(params, batch, cfg)?.into_iter().map(|(s, _)| s).collect();
    Ok(alignment_loss(&sims, cfg))
}

/// Loss and its exact gradient with respect to every projector weight and
/// bias. The gradient has the shape of `params` (head excluded).
pub fn loss_gradient(
    params: &ProjectorParams,
    batch: &AlignBatch,
    cfg: &AlignmentConfig,
) -> Result<(f64, ProjectorParams), AlignError> {
    let forwards = batch_forward(params, batch, cfg)?;
    let mut grad = params.zeros_like();
    let mut loss = 0.0;
    let n = batch.rows() as f64;
    let scale = cfg.tau.exp();
    for ((s, fwd), (&lambda, gp)) in forwards.iter().zip(cfg.lambda.iter().zip(grad.projectors.iter_mut())) {
        loss += 0.5 * lambda * (diagonal_cross_entropy(s) + diagonal_cross_entropy(&s.t().to_owned()));
        if lambda == 0.0 {
            continue;
        }
        // dL/dS = lambda/2 * (softmax_rows(S) + softmax_cols(S) - 2I) / n
        let rows = row_softmax(s);
        let cols = row_softmax(&s.t().to_owned()).reversed_axes();
        let mut g = rows + cols;
        for i in 0..s.nrows() {
            g[[i, i]] -= 2.0;
        }
        g *= 0.5 * lambda / n;

        let d_p = g.dot(&fwd.q) * scale;
        let d_q = g.t().dot(&fwd.p) * scale;
        gp.graph.weight = d_p.t().dot(&fwd.a);
        gp.graph.bias = d_p.sum_axis(Axis(0));
        gp.flow.weight = d_q.t().dot(&fwd.b);
        gp.flow.bias = d_q.sum_axis(Axis(0));
    }
    Ok((loss, grad))
}

// ---------------------------------------------------------------- training

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub lr: f64,
    pub epochs: usize,
    /// Graphs per gradient step.
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            lr: 2e-3,
            epochs: 3,
            batch: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ProjectorParams,
    /// Mean per-graph loss seen during each epoch.
    pub loss_trace: Vec<f64>,
}

/// Mini-batch gradient descent on the alignment loss. Encoders stay frozen;
/// graphs with fewer than two nodes carry no contrastive signal and are
/// left out.
pub fn train_projector(
    graphs: &[TrafficRelationGraph],
    cfg: &AlignmentConfig,
    enc: &Encoders,
    opt: &TrainOptions,
) -> Result<TrainOutcome, AlignError> {
    cfg.validate()?;
    if opt.batch == 0 {
        return Err(AlignError::InvalidConfig("batch: must be at least 1".into()));
    }
    let batches: Vec<AlignBatch> = graphs
        .iter()
        .filter(|g| g.nodes.len() >= 2)
        .map(|g| AlignBatch::from_graph(g, enc, cfg))
        .collect::<Result<_, _>>()?;
    if batches.is_empty() {
        return Err(AlignError::Degenerate);
    }

    let mut params = ProjectorParams::init(cfg, enc.graph.dim, enc.flow.dim, opt.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..batches.len()).collect();
    let mut loss_trace = Vec::with_capacity(opt.epochs);

    for _ in 0..opt.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(opt.batch) {
            let mut step = params.zeros_like();
            for &i in chunk {
                let (loss, grad) = loss_gradient(&params, &batches[i], cfg)?;
                epoch_loss += loss;
                step.axpy(1.0 / chunk.len() as f64, &grad);
            }
            params.axpy(-opt.lr, &step);
        }
        loss_trace.push(epoch_loss / batches.len() as f64);
    }
    Ok(TrainOutcome { params, loss_trace })
}

// ----------------------------------------------------------- task head

/// Mean over nodes of the first dimension's projected, normalized
/// structure encoding.
pub fn graph_embedding(
    params: &ProjectorParams,
    g: &TrafficRelationGraph,
    enc: &Encoders,
) -> Result<Array1<f64>, AlignError> {
    let proj = params
        .projectors
        .first()
        .ok_or_else(|| AlignError::ShapeMismatch("no projectors".into()))?;
    let h = enc.graph.encode(g)?;
    if h.dim() != proj.graph.d_in() {
        return Err(AlignError::ShapeMismatch(format!(
            "graph encoding width {} vs projector input {}",
            h.dim(),
            proj.graph.d_in()
        )));
    }
    let projected = proj.graph.apply(&l2_normalize_rows(&h.0));
    Ok(projected.mean_axis(Axis(0)).expect("non-empty graph"))
}

/// Fit a linear head as a nearest-class-mean rule over graph embeddings:
/// row `c` of the weight is the class mean `m_c` and its bias is
/// `-|m_c|^2 / 2`, so the arg-max logit is the closest class mean.
pub fn fit_task_head(
    params: &mut ProjectorParams,
    graphs: &[TrafficRelationGraph],
    enc: &Encoders,
) -> Result<(), AlignError> {
    let mut classes: Vec<String> = graphs.iter().filter_map(|g| g.label.clone()).collect();
    classes.sort();
    classes.dedup();
    if classes.is_empty() {
        return Err(AlignError::NoLabels);
    }
    let width = params
        .projectors
        .first()
        .ok_or_else(|| AlignError::ShapeMismatch("no projectors".into()))?
        .graph
        .d_out();
    let mut sums = Array2::<f64>::zeros((classes.len(), width));
    let mut counts = vec![0usize; classes.len()];
    for g in graphs {
        let Some(label) = &g.label else { continue };
        let c = classes.binary_search(label).expect("collected above");
        let z = graph_embedding(params, g, enc)?;
        let mut row = sums.row_mut(c);
        row += &z;
        counts[c] += 1;
    }
    let mut bias = Array1::zeros(classes.len());
    for (c, &count) in counts.iter().enumerate() {
        let mut row = sums.row_mut(c);
        row /= count as f64;
        bias[c] = -0.5 * row.dot(&row);
    }
    params.head = Some(TaskHead {
        classes,
        map: AffineMap { weight: sums, bias },
    });
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    pub scores: Vec<f64>,
}

/// Arg-max of the task head over the mean projected graph embedding.
pub fn surrogate_classify(
    params: &ProjectorParams,
    g: &TrafficRelationGraph,
    enc: &Encoders,
) -> Result<Prediction, AlignError> {
    let head = params.head.as_ref().ok_or(AlignError::NoTaskHead)?;
    let z = graph_embedding(params, g, enc)?;
    if z.len() != head.map.d_in() {
        return Err(AlignError::ShapeMismatch("head input width".into()));
    }
    let scores = head.map.apply_vec(&z);
    let best = scores
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > scores[best] { i } else { best });
    Ok(Prediction {
        label: head.classes[best].clone(),
        scores: scores.to_vec(),
    })
}

/// Everything needed to reload a trained projector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: AlignmentConfig,
    pub encoder: EncoderConfig,
    pub params: ProjectorParams,
    pub seed: u64,
    pub epochs: usize,
    pub loss_trace: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2};

    use crate::trg::trg_from_nodes;

    fn node(id: u64, start: u64, tokens: Vec<u16>, lengths: Vec<i64>) -> TrgNode {
        TrgNode {
            flow_id: id,
            label: None,
            start_ts_micros: start,
            datagram_tokens: tokens,
            directed_lengths: lengths,
        }
    }

    fn identity_params(d: usize) -> ProjectorParams {
        ProjectorParams {
            projectors: vec![DimProjector {
                dim: FeatureDim::Rd,
                graph: AffineMap::identity(d, d),
                flow: AffineMap::identity(d, d),
            }],
            head: None,
        }
    }

    fn one_dim_cfg(tau: f64) -> AlignmentConfig {
        AlignmentConfig {
            tau,
            dims: vec![FeatureDim::Rd],
            lambda: vec![1.0],
            proj_dim: 2,
        }
    }

    #[test]
    fn zero_rounds_is_raw_hash() {
        let g = trg_from_nodes(
            vec![node(1, 0, vec![1, 2], vec![60]), node(2, 10, vec![3], vec![-70])],
            1_000_000,
        );
        let h = encode_graph(&g, 0).unwrap();
        assert_eq!(h.0.row(0), node_feature_hash(&g.nodes[0], 64));
        assert_eq!(h.0.row(1), node_feature_hash(&g.nodes[1], 64));
    }

    #[test]
    fn isolated_nodes_unchanged() {
        let x = arr2(&[[1.0, 2.0], [3.0, -1.0]]);
        assert_eq!(aggregate_neighbors(&x, &[vec![], vec![]], 5), x);
    }

    #[test]
    fn path_graph_one_round() {
        let x = arr2(&[[1.0], [0.0], [0.0]]);
        let nbrs = vec![vec![1], vec![0, 2], vec![1]];
        let h = aggregate_neighbors(&x, &nbrs, 1);
        assert_eq!(h, arr2(&[[0.5], [0.25], [0.0]]));
    }

    #[test]
    fn empty_graph_rejected() {
        let g = trg_from_nodes(vec![], 1);
        assert_eq!(encode_graph(&g, 1), Err(AlignError::EmptyGraph));
    }

    #[test]
    fn flow_encoder_properties() {
        let a = node(1, 0, vec![10, 20], vec![10]);
        let b = node(2, 0, vec![10, 20], vec![-10]);
        let pl = encode_flows(&[a.clone(), a.clone(), b.clone()], FeatureDim::Pl);
        assert_eq!(pl.0.row(0), pl.0.row(1));
        assert_ne!(pl.0.row(0), pl.0.row(2));

        let c = node(3, 0, vec![7], vec![]);
        let fwd = encode_flows(&[a.clone(), c.clone()], FeatureDim::Rd);
        let rev = encode_flows(&[c, a], FeatureDim::Rd);
        assert_eq!(fwd.0.row(0), rev.0.row(1));
        assert_eq!(fwd.0.row(1), rev.0.row(0));
    }

    #[test]
    fn similarity_examples() {
        let p = identity_params(2);
        let single = EmbeddingMatrix(arr2(&[[1.0, 0.0]]));
        let s = similarity_matrix(&single, &single, &p, &one_dim_cfg(0.0), FeatureDim::Rd).unwrap();
        assert_eq!(s, arr2(&[[1.0]]));

        let eye = EmbeddingMatrix(Array2::eye(2));
        let s = similarity_matrix(&eye, &eye, &p, &one_dim_cfg(0.0), FeatureDim::Rd).unwrap();
        assert_eq!(s, Array2::<f64>::eye(2));

        let s = similarity_matrix(&eye, &eye, &p, &one_dim_cfg(2f64.ln()), FeatureDim::Rd).unwrap();
        assert!((s - Array2::<f64>::eye(2) * 2.0).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn shape_mismatch() {
        let p = identity_params(2);
        let a = EmbeddingMatrix(Array2::eye(2));
        let b = EmbeddingMatrix(Array2::zeros((3, 2)));
        assert!(matches!(
            similarity_matrix(&a, &b, &p, &one_dim_cfg(0.0), FeatureDim::Rd),
            Err(AlignError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn zero_rows_pass_through_normalization() {
        let x = arr2(&[[0.0, 0.0], [3.0, 4.0]]);
        assert_eq!(l2_normalize_rows(&x), arr2(&[[0.0, 0.0], [0.6, 0.8]]));
    }

    #[test]
    fn loss_examples() {
        let cfg = one_dim_cfg(0.0);
        assert_eq!(alignment_loss(&[arr2(&[[17.3]])], &cfg), 0.0);
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert_abs_diff_eq!(alignment_loss(&[Array2::eye(2)], &cfg), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 0.313262, epsilon = 1e-6);
        let sharp = Array2::eye(3) * 1e4;
        assert!(alignment_loss(&[sharp], &cfg) < 1e-12);
    }

    #[test]
    fn stabilized_cross_entropy_handles_large_logits() {
        let s = arr2(&[[1e5, 0.0], [0.0, 1e5]]);
        assert_eq!(diagonal_cross_entropy(&s), 0.0);
        let s = arr2(&[[0.0, 1e5], [0.0, 0.0]]);
        assert!(diagonal_cross_entropy(&s).is_finite());
    }

    fn random_batch(n: usize, d: usize, seed: u64) -> AlignBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = || EmbeddingMatrix(Array2::from_shape_simple_fn((n, d), || rng.gen_range(-1.0..1.0)));
        AlignBatch {
            h: m(),
            n: vec![m(), m()],
        }
    }

    #[test]
    fn zero_lambda_gives_zero_gradient_for_that_dim() {
        let cfg = AlignmentConfig {
            lambda: vec![0.0, 1.0],
            proj_dim: 4,
            ..AlignmentConfig::default()
        };
        let params = ProjectorParams::init(&cfg, 5, 5, 3);
        let (_, grad) = loss_gradient(&params, &random_batch(4, 5, 9), &cfg).unwrap();
        assert!(grad.projectors[0].graph.params().all(|&v| v == 0.0));
        assert!(grad.projectors[0].flow.params().all(|&v| v == 0.0));
        assert!(grad.projectors[1].graph.params().any(|&v| v != 0.0));
    }

    #[test]
    fn single_row_batch_has_zero_gradient() {
        let cfg = AlignmentConfig {
            proj_dim: 3,
            ..AlignmentConfig::default()
        };
        let params = ProjectorParams::init(&cfg, 4, 4, 1);
        let (loss, grad) = loss_gradient(&params, &random_batch(1, 4, 2), &cfg).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.flat().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn config_validation() {
        let mut cfg = AlignmentConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.lambda = vec![0.0, 0.0];
        assert!(cfg.validate().is_err());
        cfg.lambda = vec![1.0];
        assert!(cfg.validate().is_err());
        cfg = AlignmentConfig {
            proj_dim: 0,
            ..AlignmentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn head_argmax() {
        let mut params = identity_params(3);
        params.head = Some(TaskHead {
            classes: vec!["a".into(), "b".into(), "c".into()],
            map: AffineMap {
                weight: Array2::zeros((3, 3)),
                bias: arr1(&[0.0, 5.0, 1.0]),
            },
        });
        let enc = Encoders::new(&EncoderConfig {
            graph_dim: 3,
            flow_dim: 3,
            rounds: 1,
        });
        let g = trg_from_nodes(vec![node(1, 0, vec![1], vec![1])], 1);
        assert_eq!(surrogate_classify(&params, &g, &enc).unwrap().label, "b");
        params.head = None;
        assert_eq!(surrogate_classify(&params, &g, &enc), Err(AlignError::NoTaskHead));
    }

    #[test]
    fn degenerate_training_rejected() {
        let g = trg_from_nodes(vec![node(1, 0, vec![1], vec![1])], 1);
        let r = train_projector(&[g], &AlignmentConfig::default(), &Encoders::default(), &TrainOptions::default());
        assert_eq!(r, Err(AlignError::Degenerate));
    }

    #[test]
    fn flat_roundtrip() {
        let cfg = AlignmentConfig::default();
        let p = ProjectorParams::init(&cfg, 6, 5, 4);
        let mut q = p.zeros_like();
        q.set_flat(&p.flat());
        assert_eq!(p, q);
    }
}
