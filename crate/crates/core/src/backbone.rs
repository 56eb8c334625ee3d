//! Minimal time-aware node classifier with hand-derived gradients.
//!
//! A node's input vector concatenates its own feature, the mean feature over
//! [`NEIGHBOR_SLOTS`] most recent temporal neighbors (empty slots are zero)
//! and the mean of `ln(1 + Δt)` over the same slots. Two rectified linear
//! layers map it to an embedding, and a linear head with one row per known
//! class produces logits:
//!
//! ```text
//! a1 = A·z          h1 = relu(a1)
//! a2 = W·h1 + b     e  = relu(a2)
//! logits = C·e + c
//! ```

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ClassId, NodeId, NodeRecord, TemporalGraph};
use crate::rng;

pub const NEIGHBOR_SLOTS: usize = 10;
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub feature: Vec<f64>,
    pub dt: f64,
}

/// A node plus its most recent neighbors, most recent first.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeContext {
    pub node: NodeRecord,
    pub neighbors: Vec<Neighbor>,
}

impl NodeContext {
    /// Flattened model input of length `2F + 1`.
    pub fn input(&self) -> Vec<f64> {
        let f = self.node.feature.len();
        let mut z = Vec::with_capacity(2 * f + 1);
        z.extend_from_slice(&self.node.feature);
        let mut mean = vec![0.0; f];
        let mut dt = 0.0;
        for nb in self.neighbors.iter().take(NEIGHBOR_SLOTS) {
            for (m, x) in mean.iter_mut().zip(&nb.feature) {
                *m += x;
            }
            dt += nb.dt.ln_1p();
        }
        let k = NEIGHBOR_SLOTS as f64;
        z.extend(mean.into_iter().map(|m| m / k));
        z.push(dt / k);
        z
    }
}

/// Per-node incident events, for building [`NodeContext`]s.
pub struct ContextIndex<'g> {
    graph: &'g TemporalGraph,
    // event indices per node, ascending in time
    incident: Vec<Vec<u32>>,
}

impl<'g> ContextIndex<'g> {
    pub fn new(graph: &'g TemporalGraph) -> Self {
        let mut incident = vec![Vec::new(); graph.nodes().len()];
        for (i, e) in graph.events().iter().enumerate() {
            for end in [e.src, e.dst] {
                let idx = graph.node_index(end).expect("validated endpoint");
                incident[idx].push(i as u32);
            }
        }
        Self { graph, incident }
    }

    /// Context of `id` at `t_eval`: up to [`NEIGHBOR_SLOTS`] most recent
    /// events at or before `t_eval`.
    pub fn context(&self, id: NodeId, t_eval: f64) -> Result<NodeContext> {
        let idx = self.graph.node_index(id).ok_or_else(|| Error::InvalidGraph(format!("unknown node {id}")))?;
        let events = self.graph.events();
        let list = &self.incident[idx];
        let upto = list.partition_point(|&e| events[e as usize].t <= t_eval);
        let neighbors = list[..upto]
            .iter()
            .rev()
            .take(NEIGHBOR_SLOTS)
            .map(|&e| {
                let e = &events[e as usize];
                let other = if e.src == id { e.dst } else { e.src };
                Neighbor { feature: self.graph.node(other).unwrap().feature.clone(), dt: t_eval - e.t }
            })
            .collect();
        Ok(NodeContext { node: self.graph.nodes()[idx].clone(), neighbors })
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn matvec(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), x);
        }
    }

    /// out += selfᵀ·y
    fn matvec_t_acc(&self, y: &[f64], out: &mut [f64]) {
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                for (o, w) in out.iter_mut().zip(self.row(r)) {
                    *o += yr * w;
                }
            }
        }
    }

    /// self += y ⊗ x
    fn outer_acc(&mut self, y: &[f64], x: &[f64]) {
        let cols = self.cols;
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                for (w, xv) in self.data[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                    *w += yr * xv;
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// All trainable tensors plus the class order of the head.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub agg: Matrix,
    pub hidden: Matrix,
    pub hidden_bias: Vec<f64>,
    pub head: Matrix,
    pub head_bias: Vec<f64>,
    pub classes: Vec<ClassId>,
}

/// Intermediate activations of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub a1: Vec<f64>,
    pub h1: Vec<f64>,
    pub a2: Vec<f64>,
    pub embedding: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Gradients, shaped like [`Params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub agg: Matrix,
    pub hidden: Matrix,
    pub hidden_bias: Vec<f64>,
    pub head: Matrix,
    pub head_bias: Vec<f64>,
}

impl Grads {
    pub fn zeros_like(p: &Params) -> Self {
        Self {
            agg: Matrix::zeros(p.agg.rows, p.agg.cols),
            hidden: Matrix::zeros(p.hidden.rows, p.hidden.cols),
            hidden_bias: vec![0.0; p.hidden_bias.len()],
            head: Matrix::zeros(p.head.rows, p.head.cols),
            head_bias: vec![0.0; p.head_bias.len()],
        }
    }

    pub fn tensors(&self) -> [(&'static str, &[f64]); 5] {
        [
            ("agg", &self.agg.data),
            ("hidden", &self.hidden.data),
            ("hidden_bias", &self.hidden_bias),
            ("head", &self.head.data),
            ("head_bias", &self.head_bias),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [&mut self.agg.data, &mut self.hidden.data, &mut self.hidden_bias, &mut self.head.data, &mut self.head_bias]
    }

    /// self += scale * other
    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b.1) {
                *x += scale * y;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.1.iter()).fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Extra loss term defined on the embeddings of a batch, e.g. distribution
/// alignment. Returns the value and `∂loss/∂embedding` per batch item.
pub trait EmbeddingLoss {
    fn value_and_grad(&self, embeddings: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    /// Mean cross-entropy over the batch.
    pub ce: f64,
    /// Auxiliary term, zero when absent.
    pub aux: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.ce + self.aux
    }
}

impl Params {
    pub fn input_dim(&self) -> usize {
        self.agg.cols
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.rows
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, class: ClassId) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    fn check_input(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: z.len() });
        }
        Ok(())
    }

    pub fn forward(&self, z: &[f64]) -> Result<Forward> {
        self.check_input(z)?;
        let h = self.hidden_dim();
        let mut a1 = vec![0.0; h];
        self.agg.matvec(z, &mut a1);
        let h1: Vec<f64> = a1.iter().map(|&x| x.max(0.0)).collect();
        let mut a2 = vec![0.0; h];
        self.hidden.matvec(&h1, &mut a2);
        for (a, b) in a2.iter_mut().zip(&self.hidden_bias) {
            *a += b;
        }
        let embedding: Vec<f64> = a2.iter().map(|&x| x.max(0.0)).collect();
        let mut logits = vec![0.0; self.num_classes()];
        self.head.matvec(&embedding, &mut logits);
        for (l, b) in logits.iter_mut().zip(&self.head_bias) {
            *l += b;
        }
        Ok(Forward { a1, h1, a2, embedding, logits })
    }

    pub fn embed_input(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.forward(z).map(|f| f.embedding)
    }

    pub fn classify_input(&self, z: &[f64]) -> Result<Vec<f64>> {
        if self.classes.is_empty() {
            return Err(Error::Empty("classifier head has no classes"));
        }
        Ok(softmax(&self.forward(z)?.logits))
    }

    /// Mean cross-entropy over `batch` (input, head row) plus an optional
    /// embedding-level term, with exact gradients for every parameter.
    pub fn loss_and_grads(
        &self,
        batch: &[(&[f64], usize)],
        aux: Option<&dyn EmbeddingLoss>,
    ) -> Result<(LossParts, Grads)> {
        let mut grads = Grads::zeros_like(self);
        let mut parts = LossParts::default();
        if batch.is_empty() {
            return Ok((parts, grads));
        }
        for &(z, label) in batch {
            self.check_input(z)?;
            if label >= self.num_classes() {
                return Err(Error::LabelOutOfRange { label, classes: self.num_classes() });
            }
        }
        let fwd: Vec<Forward> = batch.iter().map(|(z, _)| self.forward(z)).collect::<Result<_>>()?;

        let aux_grads = match aux {
            Some(term) => {
                let emb: Vec<Vec<f64>> = fwd.iter().map(|f| f.embedding.clone()).collect();
                let (v, g) = term.value_and_grad(&emb)?;
                parts.aux = v;
                Some(g)
            }
            None => None,
        };

        let inv_b = 1.0 / batch.len() as f64;
        let h = self.hidden_dim();
        for (i, ((z, label), f)) in batch.iter().zip(&fwd).enumerate() {
            let probs = softmax(&f.logits);
            parts.ce -= log_softmax_at(&f.logits, *label) * inv_b;

            let mut dlogits = probs;
            dlogits[*label] -= 1.0;
            dlogits.iter_mut().for_each(|d| *d *= inv_b);
            grads.head.outer_acc(&dlogits, &f.embedding);
            for (g, d) in grads.head_bias.iter_mut().zip(&dlogits) {
                *g += d;
            }

            let mut de = vec![0.0; h];
            self.head.matvec_t_acc(&dlogits, &mut de);
            if let Some(ag) = &aux_grads {
                for (d, a) in de.iter_mut().zip(&ag[i]) {
                    *d += a;
                }
            }
            self.backprop_embedding(z, f, &de, &mut grads);
        }
        Ok((parts, grads))
    }

    /// Value and gradients of an embedding-level loss alone. The head gets
    /// zero gradient.
    pub fn embedding_loss_and_grads(&self, inputs: &[&[f64]], term: &dyn EmbeddingLoss) -> Result<(f64, Grads)> {
        let mut grads = Grads::zeros_like(self);
        let fwd: Vec<Forward> = inputs.iter().map(|z| self.forward(z)).collect::<Result<_>>()?;
        let emb: Vec<Vec<f64>> = fwd.iter().map(|f| f.embedding.clone()).collect();
        let (value, de) = term.value_and_grad(&emb)?;
        for ((z, f), d) in inputs.iter().zip(&fwd).zip(&de) {
            self.backprop_embedding(z, f, d, &mut grads);
        }
        Ok((value, grads))
    }

    /// Accumulates parameter gradients below the embedding given `∂L/∂e`.
    fn backprop_embedding(&self, z: &[f64], f: &Forward, de: &[f64], grads: &mut Grads) {
        let h = self.hidden_dim();
        let da2: Vec<f64> = de.iter().zip(&f.a2).map(|(d, &a)| if a > 0.0 { *d } else { 0.0 }).collect();
        grads.hidden.outer_acc(&da2, &f.h1);
        for (g, d) in grads.hidden_bias.iter_mut().zip(&da2) {
            *g += d;
        }
        let mut dh1 = vec![0.0; h];
        self.hidden.matvec_t_acc(&da2, &mut dh1);
        let da1: Vec<f64> = dh1.iter().zip(&f.a1).map(|(d, &a)| if a > 0.0 { *d } else { 0.0 }).collect();
        grads.agg.outer_acc(&da1, z);
    }

    pub fn tensors(&self) -> [(&'static str, &[f64]); 5] {
        [
            ("agg", &self.agg.data),
            ("hidden", &self.hidden.data),
            ("hidden_bias", &self.hidden_bias),
            ("head", &self.head.data),
            ("head_bias", &self.head_bias),
        ]
    }

    /// Mutable views of every tensor, in the order of [`Params::tensors`].
    pub fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [&mut self.agg.data, &mut self.hidden.data, &mut self.hidden_bias, &mut self.head.data, &mut self.head_bias]
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.1.iter().all(|x| x.is_finite()))
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `ln softmax(logits)[i]`, computed stably.
pub fn log_softmax_at(logits: &[f64], i: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits[i] - lse
}

/// Read access shared by the live model and frozen snapshots.
pub trait Model {
    fn params(&self) -> &Params;

    fn embed(&self, ctx: &NodeContext) -> Result<Vec<f64>> {
        self.params().embed_input(&ctx.input())
    }

    fn classify(&self, ctx: &NodeContext) -> Result<Vec<f64>> {
        self.params().classify_input(&ctx.input())
    }

    fn classes(&self) -> &[ClassId] {
        &self.params().classes
    }
}

/// The trainable model.
#[derive(Clone, Debug)]
pub struct Backbone {
    params: Params,
    head_seed: u64,
    head_rng: ChaCha8Rng,
    head_draws: u64,
}

impl Model for Backbone {
    fn params(&self) -> &Params {
        &self.params
    }
}

impl Backbone {
    /// Fresh model for `feature_dim`-dimensional node features.
    pub fn new(feature_dim: usize, hidden: usize, seed: u64) -> Self {
        let input = 2 * feature_dim + 1;
        let mut rng = rng::stream(seed, &[rng::TAG_INIT]);
        let mut he = |rows: usize, cols: usize| {
            let bound = (6.0 / cols as f64).sqrt();
            Matrix { rows, cols, data: (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect() }
        };
        let agg = he(hidden, input);
        let hidden_m = he(hidden, hidden);
        let head_seed = rng::derive_seed(seed, &[rng::TAG_HEAD]);
        Self {
            params: Params {
                agg,
                hidden: hidden_m,
                hidden_bias: vec![0.0; hidden],
                head: Matrix::zeros(0, hidden),
                head_bias: Vec::new(),
                classes: Vec::new(),
            },
            head_seed,
            head_rng: ChaCha8Rng::seed_from_u64(head_seed),
            head_draws: 0,
        }
    }

    pub fn from_params(params: Params, head_seed: u64, head_draws: u64) -> Self {
        let mut head_rng = ChaCha8Rng::seed_from_u64(head_seed);
        for _ in 0..head_draws {
            let _: f64 = head_rng.random();
        }
        Self { params, head_seed, head_rng, head_draws }
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Appends one head row per class, drawn uniformly from `±1/√H`. Existing
    /// rows are untouched.
    pub fn grow_head(&mut self, new_classes: &[ClassId]) -> Result<()> {
        for (i, c) in new_classes.iter().enumerate() {
            if self.params.classes.contains(c) || new_classes[..i].contains(c) {
                return Err(Error::DuplicateClass(c.0));
            }
        }
        let h = self.params.hidden_dim();
        let bound = 1.0 / (h as f64).sqrt();
        for &c in new_classes {
            for _ in 0..h {
                let u: f64 = self.head_rng.random();
                self.params.head.data.push((2.0 * u - 1.0) * bound);
            }
            self.head_draws += h as u64;
            self.params.head.rows += 1;
            self.params.head_bias.push(0.0);
            self.params.classes.push(c);
        }
        Ok(())
    }

    /// One gradient-descent step.
    pub fn apply(&mut self, grads: &Grads, lr: f64) -> Result<()> {
        for (p, g) in self.params.tensors_mut().into_iter().zip(grads.tensors()) {
            for (w, d) in p.iter_mut().zip(g.1) {
                *w -= lr * d;
            }
        }
        if !self.params.all_finite() {
            return Err(Error::NonFinite);
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot { params: Arc::new(self.params.clone()) }
    }

    pub fn restore(&mut self, snap: &Snapshot) {
        self.params = (*snap.params).clone();
    }

    pub fn head_state(&self) -> (u64, u64) {
        (self.head_seed, self.head_draws)
    }
}

/// Frozen copy of a model's parameters.
#[derive(Clone, Debug)]
pub struct Snapshot {
    params: Arc<Params>,
}

impl Model for Snapshot {
    fn params(&self) -> &Params {
        &self.params
    }
}

impl PartialEq for Snapshot {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

const CHECKPOINT_FORMAT: &str = "tgcl-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    classes: Vec<ClassId>,
    tensors: Vec<Tensor>,
}

impl Snapshot {
    pub fn from_params(params: Params) -> Self {
        Self { params: Arc::new(params) }
    }

    pub fn snapshot(&self) -> Snapshot {
        self.clone()
    }

    /// JSON checkpoint: every tensor row-major with a shape header.
    pub fn to_json(&self) -> Result<String> {
        let p = &*self.params;
        let t = |name: &str, shape: Vec<usize>, data: &[f64]| Tensor { name: name.into(), shape, data: data.to_vec() };
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            classes: p.classes.clone(),
            tensors: vec![
                t("agg", vec![p.agg.rows, p.agg.cols], &p.agg.data),
                t("hidden", vec![p.hidden.rows, p.hidden.cols], &p.hidden.data),
                t("hidden_bias", vec![p.hidden_bias.len()], &p.hidden_bias),
                t("head", vec![p.head.rows, p.head.cols], &p.head.data),
                t("head_bias", vec![p.head_bias.len()], &p.head_bias),
            ],
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        let mut get = |name: &str, rank: usize| -> Result<(Vec<usize>, Vec<f64>)> {
            let pos = ck
                .tensors
                .iter()
                .position(|t| t.name == name)
                .ok_or_else(|| Error::config(format!("checkpoint is missing tensor {name}")))?;
            let t = ck.tensors.swap_remove(pos);
            if t.shape.len() != rank || t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::config(format!("tensor {name} has inconsistent shape {:?}", t.shape)));
            }
            Ok((t.shape, t.data))
        };
        let mat = |(s, d): (Vec<usize>, Vec<f64>)| Matrix { rows: s[0], cols: s[1], data: d };
        let agg = mat(get("agg", 2)?);
        let hidden = mat(get("hidden", 2)?);
        let hidden_bias = get("hidden_bias", 1)?.1;
        let head = mat(get("head", 2)?);
        let head_bias = get("head_bias", 1)?.1;
        let h = hidden.rows;
        if agg.rows != h || hidden.cols != h || hidden_bias.len() != h || head.cols != h {
            return Err(Error::config("checkpoint tensors disagree on the hidden size"));
        }
        if head.rows != ck.classes.len() || head_bias.len() != ck.classes.len() {
            return Err(Error::config("checkpoint head does not match its class list"));
        }
        Ok(Self::from_params(Params { agg, hidden, hidden_bias, head, head_bias, classes: ck.classes }))
    }
}
