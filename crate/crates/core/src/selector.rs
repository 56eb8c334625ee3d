//! Replay-subset selection.
//!
//! The replay subset minimises `α·mean(j_cls) + MMD²(partition, subset)` where
//! `j_cls` is the cross-entropy of the previous period's frozen model and the
//! MMD is computed on that model's embeddings. The coverage subset minimises
//! the MMD term alone. Both are built greedily, one partition at a time, and
//! the per-partition picks are concatenated in partition order.

use std::collections::BTreeMap;
use std::time::Instant;

use itertools::Itertools;
use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{log_softmax_at, softmax, Model, Snapshot};
use crate::dataset::PeriodData;
use crate::error::{Error, Result};
use crate::graph::{ClassId, NodeId, Split};
use crate::kernels::{self, KernelParams};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partitioner {
    Random,
    Kmeans,
    Hierarchical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// `α·j_cls(v) + j_mmd(v)`, the greedy witness.
    Witness,
    /// True objective after adding `v`.
    ExactMarginal,
}

/// Whether the budgets are spent over all old-class nodes at once or split
/// evenly over old classes with selection run inside each class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionScope {
    Global,
    PerClass,
}

/// Per-node error of the previous model used as `j_cls`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorLoss {
    /// `−ln p_y`.
    CrossEntropy,
    /// `Σ_c (p_c − 1[c = y])²`, bounded by 2.
    SquaredError,
}

impl ErrorLoss {
    pub fn eval(self, logits: &[f64], row: usize) -> f64 {
        match self {
            ErrorLoss::CrossEntropy => -log_softmax_at(logits, row),
            ErrorLoss::SquaredError => softmax(logits)
                .iter()
                .enumerate()
                .map(|(c, p)| {
                    let d = p - if c == row { 1.0 } else { 0.0 };
                    d * d
                })
                .sum(),
        }
    }
}

/// Which objective terms drive selection of the replay subset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionTerms {
    Both,
    ErrorOnly,
    DistributionOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub alpha: f64,
    pub m: usize,
    pub m_prime: usize,
    pub partition_size: usize,
    pub partitioner: Partitioner,
    pub scoring_mode: ScoringMode,
    pub seed: u64,
    #[serde(default = "default_terms")]
    pub terms: SelectionTerms,
    #[serde(default = "default_scope")]
    pub scope: SelectionScope,
    #[serde(default = "default_error_loss")]
    pub error_loss: ErrorLoss,
    #[serde(default)]
    pub squared_distance: bool,
    /// Run partitions on the rayon pool. Output is identical either way.
    #[serde(default)]
    pub parallel: bool,
}

fn default_terms() -> SelectionTerms {
    SelectionTerms::Both
}

fn default_error_loss() -> ErrorLoss {
    ErrorLoss::CrossEntropy
}

fn default_scope() -> SelectionScope {
    SelectionScope::PerClass
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            m: 60,
            m_prime: 60,
            partition_size: 400,
            partitioner: Partitioner::Random,
            scoring_mode: ScoringMode::Witness,
            seed: 0,
            terms: SelectionTerms::Both,
            scope: SelectionScope::PerClass,
            error_loss: ErrorLoss::CrossEntropy,
            squared_distance: false,
            parallel: false,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("sel.alpha must be a non-negative number"));
        }
        if self.m < 1 {
            return Err(Error::config("sel.m must be at least 1"));
        }
        if self.partition_size <= self.m {
            return Err(Error::config(format!(
                "sel.partition_size ({}) must exceed sel.m ({})",
                self.partition_size, self.m
            )));
        }
        Ok(())
    }

    fn alpha_for_sub(&self) -> f64 {
        match self.terms {
            SelectionTerms::DistributionOnly => 0.0,
            _ => self.alpha,
        }
    }
}

/// One old-class node as seen by the frozen previous model.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub id: NodeId,
    pub label: ClassId,
    pub embedding: Vec<f64>,
    pub j_cls: f64,
}

/// Error of `prev` on a node with the given input and label.
pub fn j_cls(input: &[f64], label: ClassId, prev: &Snapshot, loss: ErrorLoss) -> Result<f64> {
    let row = prev.params().class_index(label).ok_or(Error::UnknownClass(label.0))?;
    let f = prev.params().forward(input)?;
    Ok(loss.eval(&f.logits, row))
}

/// Embeds and scores `ids` with `prev`.
pub fn score_candidates(data: &PeriodData, ids: &[NodeId], prev: &Snapshot, loss: ErrorLoss) -> Result<Vec<Candidate>> {
    ids.iter()
        .map(|&id| {
            let label = data.label(id)?;
            let row = prev.params().class_index(label).ok_or(Error::UnknownClass(label.0))?;
            let f = prev.params().forward(data.input(id)?)?;
            Ok(Candidate { id, label, j_cls: loss.eval(&f.logits, row), embedding: f.embedding })
        })
        .collect()
}

/// Dense kernel matrix over one partition.
pub struct KernelMatrix {
    n: usize,
    k: Vec<f64>,
    row_sums: Vec<f64>,
}

impl KernelMatrix {
    pub fn new(cands: &[&Candidate], p: &KernelParams) -> Self {
        let n = cands.len();
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            k[i * n + i] = p.eval(&cands[i].embedding, &cands[i].embedding);
            for j in (i + 1)..n {
                let v = p.eval(&cands[i].embedding, &cands[j].embedding);
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
        }
        let row_sums = (0..n).map(|i| k[i * n..(i + 1) * n].iter().sum()).collect();
        Self { n, k, row_sums }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.k[i * self.n + j]
    }
}

/// Greedy minimisation over one partition. Returns positions into `cands`
/// in pick order. With `use_mmd == false` the score is `j_cls` alone.
/// Ties go to the smallest node id.
pub fn greedy(
    cands: &[&Candidate],
    km: &KernelMatrix,
    budget: usize,
    alpha: f64,
    use_mmd: bool,
    mode: ScoringMode,
) -> Result<Vec<usize>> {
    if cands.is_empty() {
        return Err(Error::Empty("greedy selection over an empty partition"));
    }
    let n = cands.len();
    let budget = budget.min(n);
    let nf = n as f64;
    let self_part: f64 = km.row_sums.iter().sum::<f64>() / (nf * nf);

    let mut taken = vec![false; n];
    let mut sub_sum = vec![0.0; n]; // Σ_{u ∈ S} k(v, u)
    let mut picks = Vec::with_capacity(budget);
    let (mut sum_j, mut sum_rows, mut gram) = (0.0, 0.0, 0.0);

    for _ in 0..budget {
        let s = picks.len() as f64;
        let mut best: Option<(f64, NodeId, usize)> = None;
        for v in (0..n).filter(|&v| !taken[v]) {
            let c = cands[v];
            let score = if !use_mmd {
                c.j_cls
            } else {
                match mode {
                    ScoringMode::Witness => {
                        let sub_term = if s > 0.0 { 2.0 / s * sub_sum[v] } else { 0.0 };
                        alpha * c.j_cls + sub_term - 2.0 / nf * km.row_sums[v]
                    }
                    ScoringMode::ExactMarginal => {
                        let s1 = s + 1.0;
                        let g = gram + 2.0 * sub_sum[v] + km.get(v, v);
                        let r = sum_rows + km.row_sums[v];
                        alpha * (sum_j + c.j_cls) / s1 + self_part - 2.0 * r / (nf * s1) + g / (s1 * s1)
                    }
                }
            };
            let better = match best {
                None => true,
                Some((b, id, _)) => score < b || (score == b && c.id < id),
            };
            if better {
                best = Some((score, c.id, v));
            }
        }
        let (_, _, u) = best.expect("budget is bounded by the candidate count");
        taken[u] = true;
        sum_j += cands[u].j_cls;
        sum_rows += km.row_sums[u];
        gram += 2.0 * sub_sum[u] + km.get(u, u);
        for (v, acc) in sub_sum.iter_mut().enumerate() {
            *acc += km.get(v, u);
        }
        picks.push(u);
    }
    Ok(picks)
}

/// `α·mean(j_cls(S)) + MMD²(part, S)`, evaluated directly.
pub fn selection_objective(part: &[&Candidate], subset: &[usize], alpha: f64, p: &KernelParams) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::Empty("objective of an empty subset"));
    }
    let mean_j = subset.iter().map(|&i| part[i].j_cls).sum::<f64>() / subset.len() as f64;
    let pe: Vec<&[f64]> = part.iter().map(|c| c.embedding.as_slice()).collect();
    let se: Vec<&[f64]> = subset.iter().map(|&i| part[i].embedding.as_slice()).collect();
    Ok(alpha * mean_j + kernels::mmd_sq(&pe, &se, p)?)
}

/// Replay-subset selection over one partition.
pub fn greedy_select_sub(
    part: &[&Candidate],
    budget: usize,
    kernel: &KernelParams,
    cfg: &SelectionConfig,
) -> Result<Vec<usize>> {
    let km = KernelMatrix::new(part, kernel);
    let use_mmd = cfg.terms != SelectionTerms::ErrorOnly;
    greedy(part, &km, budget, cfg.alpha_for_sub(), use_mmd, cfg.scoring_mode)
}

/// Coverage-subset selection over one partition (MMD term only).
pub fn greedy_select_sim(
    part: &[&Candidate],
    budget: usize,
    kernel: &KernelParams,
    cfg: &SelectionConfig,
) -> Result<Vec<usize>> {
    if budget == 0 {
        return Ok(Vec::new());
    }
    let km = KernelMatrix::new(part, kernel);
    greedy(part, &km, budget, 0.0, true, cfg.scoring_mode)
}

pub const BRUTE_FORCE_MAX_NODES: usize = 16;
pub const BRUTE_FORCE_MAX_BUDGET: usize = 5;

/// Exhaustive minimiser of [`selection_objective`] over all subsets of size
/// `budget`. Returns the subset (ascending positions) and its objective.
pub fn brute_force_select(
    part: &[&Candidate],
    budget: usize,
    alpha: f64,
    p: &KernelParams,
) -> Result<(Vec<usize>, f64)> {
    if part.len() > BRUTE_FORCE_MAX_NODES || budget > BRUTE_FORCE_MAX_BUDGET {
        return Err(Error::TooLarge(format!("{} nodes, budget {}", part.len(), budget)));
    }
    if budget == 0 || budget > part.len() {
        return Err(Error::config(format!("budget {} invalid for {} nodes", budget, part.len())));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for subset in (0..part.len()).combinations(budget) {
        let v = selection_objective(part, &subset, alpha, p)?;
        if best.as_ref().is_none_or(|(_, b)| v < *b) {
            best = Some((subset, v));
        }
    }
    Ok(best.expect("at least one subset"))
}

/// Splits `total` over parts proportionally to nothing but order: each part
/// gets `total / W`, the first `total % W` parts one more. Quotas are capped
/// by part size and any excess moves to later parts with room.
pub fn allocate_quotas(sizes: &[usize], total: usize) -> Vec<usize> {
    let w = sizes.len();
    if w == 0 {
        return Vec::new();
    }
    let total = total.min(sizes.iter().sum());
    let mut q: Vec<usize> = (0..w).map(|i| total / w + usize::from(i < total % w)).collect();
    let mut excess = 0;
    for (qi, &s) in q.iter_mut().zip(sizes) {
        if *qi > s {
            excess += *qi - s;
            *qi = s;
        }
    }
    while excess > 0 {
        for (qi, &s) in q.iter_mut().zip(sizes) {
            if excess > 0 && *qi < s {
                *qi += 1;
                excess -= 1;
            }
        }
    }
    q
}

/// Splits candidates into `ceil(n / p)` parts of at most `p` members.
/// Returns positions into `cands`. `stream` keys the partitioner's rng.
pub fn partition(cands: &[Candidate], cfg: &SelectionConfig, stream: &[u64]) -> Result<Vec<Vec<usize>>> {
    let p = cfg.partition_size;
    if p < 1 {
        return Err(Error::config("partition size must be at least 1"));
    }
    let n = cands.len();
    if n == 0 {
        return Err(Error::Empty("nothing to partition"));
    }
    let w = n.div_ceil(p);
    let mut key = vec![rng::TAG_PARTITION];
    key.extend_from_slice(stream);
    let mut rng = rng::stream(cfg.seed, &key);
    if w == 1 {
        return Ok(vec![(0..n).collect()]);
    }
    let parts = match cfg.partitioner {
        Partitioner::Random => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let mut out = Vec::with_capacity(w);
            let mut start = 0;
            for i in 0..w {
                let len = n / w + usize::from(i < n % w);
                out.push(idx[start..start + len].to_vec());
                start += len;
            }
            out
        }
        Partitioner::Kmeans => {
            let emb: Vec<&[f64]> = cands.iter().map(|c| c.embedding.as_slice()).collect();
            let centroids = lloyd(&emb, w, &mut rng);
            balance(&emb, &centroids, p)
        }
        Partitioner::Hierarchical => {
            let emb: Vec<&[f64]> = cands.iter().map(|c| c.embedding.as_slice()).collect();
            let labels = average_linkage(&emb, w);
            let centroids = centroids_of(&emb, &labels, w);
            balance(&emb, &centroids, p)
        }
    };
    Ok(parts)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn centroids_of(emb: &[&[f64]], labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = emb[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (e, &l) in emb.iter().zip(labels) {
        counts[l] += 1;
        for (s, x) in sums[l].iter_mut().zip(*e) {
            *s += x;
        }
    }
    sums.into_iter()
        .zip(counts)
        .filter(|(_, c)| *c > 0)
        .map(|(s, c)| s.into_iter().map(|x| x / c as f64).collect())
        .collect()
}

/// Lloyd's algorithm with k-means++ seeding.
fn lloyd<R: Rng>(emb: &[&[f64]], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = emb.len();
    let mut centroids: Vec<Vec<f64>> = vec![emb[rng.random_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = emb.iter().map(|e| sq_dist(e, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.push(emb[next].to_vec());
        let c = centroids.last().unwrap();
        for (d, e) in d2.iter_mut().zip(emb) {
            *d = d.min(sq_dist(e, c));
        }
    }
    let mut labels = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for (l, e) in labels.iter_mut().zip(emb) {
            let best = nearest(e, &centroids);
            if *l != best {
                *l = best;
                changed = true;
            }
        }
        let fresh = centroids_of(emb, &labels, centroids.len());
        if fresh.len() == centroids.len() {
            centroids = fresh;
        }
        if !changed {
            break;
        }
    }
    centroids
}

fn nearest(e: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(e, c);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Assigns points to centroids with capacity `cap` each. Points closest to
/// their best centroid are placed first; the rest spill to the nearest
/// centroid that still has room. Empty clusters are dropped.
fn balance(emb: &[&[f64]], centroids: &[Vec<f64>], cap: usize) -> Vec<Vec<usize>> {
    let k = centroids.len();
    let dists: Vec<Vec<f64>> = emb.iter().map(|e| centroids.iter().map(|c| sq_dist(e, c)).collect()).collect();
    let mut order: Vec<usize> = (0..emb.len()).collect();
    let min_d = |i: usize| dists[i].iter().cloned().fold(f64::INFINITY, f64::min);
    order.sort_by(|&a, &b| min_d(a).total_cmp(&min_d(b)).then(a.cmp(&b)));
    let mut parts = vec![Vec::new(); k];
    for i in order {
        let mut prefs: Vec<usize> = (0..k).collect();
        prefs.sort_by(|&a, &b| dists[i][a].total_cmp(&dists[i][b]).then(a.cmp(&b)));
        let c = prefs.into_iter().find(|&c| parts[c].len() < cap).expect("total capacity covers every point");
        parts[c].push(i);
    }
    parts.retain(|p| !p.is_empty());
    for p in &mut parts {
        p.sort_unstable();
    }
    parts
}

/// Average-linkage agglomerative clustering (nearest-neighbour chain), cut
/// at `k` clusters. Returns a cluster label per point.
fn average_linkage(emb: &[&[f64]], k: usize) -> Vec<usize> {
    let n = emb.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = sq_dist(emb[i], emb[j]).sqrt();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut merges: Vec<(usize, usize, f64)> = Vec::with_capacity(n.saturating_sub(1));
    let mut chain: Vec<usize> = Vec::new();
    let mut remaining = n;
    while remaining > 1 {
        if chain.is_empty() {
            chain.push((0..n).find(|&i| active[i]).unwrap());
        }
        loop {
            let a = *chain.last().unwrap();
            let prev = if chain.len() >= 2 { Some(chain[chain.len() - 2]) } else { None };
            let mut best = (f64::INFINITY, usize::MAX);
            for j in (0..n).filter(|&j| active[j] && j != a) {
                let v = d[a * n + j];
                // prefer the chain predecessor on ties so the chain terminates
                if v < best.0 || (v == best.0 && Some(j) == prev) {
                    best = (v, j);
                }
            }
            let b = best.1;
            if Some(b) == prev {
                chain.pop();
                chain.pop();
                let (keep, gone) = (a.min(b), a.max(b));
                merges.push((keep, gone, best.0));
                let (sa, sb) = (size[keep] as f64, size[gone] as f64);
                for j in (0..n).filter(|&j| active[j] && j != keep && j != gone) {
                    let v = (sa * d[keep * n + j] + sb * d[gone * n + j]) / (sa + sb);
                    d[keep * n + j] = v;
                    d[j * n + keep] = v;
                }
                size[keep] += size[gone];
                active[gone] = false;
                remaining -= 1;
                break;
            }
            chain.push(b);
        }
    }
    // Average linkage is reducible, so applying merges in distance order
    // reproduces the dendrogram; the first n - k merges give k clusters.
    merges.sort_by(|a, b| a.2.total_cmp(&b.2));
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(a, b, _) in merges.iter().take(n.saturating_sub(k)) {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra.max(rb)] = ra.min(rb);
    }
    let mut label_of = BTreeMap::new();
    (0..n)
        .map(|i| {
            let r = find(&mut parent, i);
            let next = label_of.len();
            *label_of.entry(r).or_insert(next)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubEntry {
    pub id: NodeId,
    pub label: ClassId,
    pub j_cls: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub period: usize,
    pub sub: Vec<SubEntry>,
    pub sim: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelParams>,
    pub config: serde_json::Value,
}

impl ReplayBuffer {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PartReport {
    pub size: usize,
    pub sub_quota: usize,
    pub sim_quota: usize,
    /// Mean `j_cls` of the part's replay picks.
    pub error_term: f64,
    /// `MMD²(part, picks)`.
    pub mmd_term: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub gamma: f64,
    pub parts: Vec<PartReport>,
    pub total_ms: f64,
}

/// Builds the replay and coverage subsets from the old-class training nodes
/// of `data`, scored by the previous period's snapshot.
pub fn select(data: &PeriodData, prev: &Snapshot, cfg: &SelectionConfig) -> Result<(ReplayBuffer, SelectionReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let period = data.view.period_index;
    let ids = data.view.old_in(Split::Train);
    if ids.is_empty() {
        return Err(Error::Empty("no old-class training nodes to select from"));
    }
    let cands = score_candidates(data, &ids, prev, cfg.error_loss)?;
    let n = cands.len();
    if cfg.m > n {
        warn!("period {period}: budget m = {} exceeds {} old-class training nodes; clamping", cfg.m, n);
    }
    if cfg.m_prime > n {
        warn!("period {period}: budget m' = {} exceeds {} old-class training nodes; clamping", cfg.m_prime, n);
    }

    let embeddings: Vec<&[f64]> = cands.iter().map(|c| c.embedding.as_slice()).collect();
    let kernel = if n >= 2 {
        kernels::median_heuristic(&embeddings, rng::derive_seed(cfg.seed, &[period as u64]), cfg.squared_distance)?
    } else {
        KernelParams::with_distance(1.0, cfg.squared_distance)?
    };

    // groups of candidate positions: one per class, or everything at once
    let groups: Vec<Vec<usize>> = match cfg.scope {
        SelectionScope::Global => vec![(0..n).collect()],
        SelectionScope::PerClass => {
            let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
            for (i, c) in cands.iter().enumerate() {
                by_class.entry(c.label).or_default().push(i);
            }
            by_class.into_values().collect()
        }
    };
    let group_sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let group_sub = allocate_quotas(&group_sizes, cfg.m);
    let group_sim = allocate_quotas(&group_sizes, cfg.m_prime);
    let (mut parts, mut sub_q, mut sim_q) = (Vec::new(), Vec::new(), Vec::new());
    for (g, members) in groups.iter().enumerate() {
        let local: Vec<Candidate> = members.iter().map(|&i| cands[i].clone()).collect();
        let local_parts = partition(&local, cfg, &[period as u64, g as u64])?;
        let sizes: Vec<usize> = local_parts.iter().map(Vec::len).collect();
        sub_q.extend(allocate_quotas(&sizes, group_sub[g]));
        sim_q.extend(allocate_quotas(&sizes, group_sim[g]));
        parts.extend(local_parts.into_iter().map(|p| p.into_iter().map(|i| members[i]).collect::<Vec<_>>()));
    }

    let run_part = |w: usize| -> Result<(Vec<usize>, Vec<usize>, PartReport)> {
        let t0 = Instant::now();
        let members: Vec<&Candidate> = parts[w].iter().map(|&i| &cands[i]).collect();
        let km = KernelMatrix::new(&members, &kernel);
        let use_mmd = cfg.terms != SelectionTerms::ErrorOnly;
        let sub = if sub_q[w] > 0 {
            greedy(&members, &km, sub_q[w], cfg.alpha_for_sub(), use_mmd, cfg.scoring_mode)?
        } else {
            Vec::new()
        };
        let sim = if sim_q[w] > 0 { greedy(&members, &km, sim_q[w], 0.0, true, cfg.scoring_mode)? } else { Vec::new() };
        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        let mut report =
            PartReport { size: members.len(), sub_quota: sub_q[w], sim_quota: sim_q[w], wall_ms, ..Default::default() };
        if !sub.is_empty() {
            report.error_term = sub.iter().map(|&i| members[i].j_cls).sum::<f64>() / sub.len() as f64;
            report.mmd_term = selection_objective(&members, &sub, 0.0, &kernel)?;
        }
        let to_global = |v: Vec<usize>| v.into_iter().map(|i| parts[w][i]).collect::<Vec<_>>();
        Ok((to_global(sub), to_global(sim), report))
    };
    let results: Vec<_> = if cfg.parallel {
        (0..parts.len()).into_par_iter().map(run_part).collect::<Result<_>>()?
    } else {
        (0..parts.len()).map(run_part).collect::<Result<_>>()?
    };

    let mut buffer = ReplayBuffer {
        period,
        sub: Vec::new(),
        sim: Vec::new(),
        kernel: Some(kernel),
        config: serde_json::to_value(cfg)?,
    };
    let mut report = SelectionReport { gamma: kernel.gamma, ..Default::default() };
    for (sub, sim, part) in results {
        buffer.sub.extend(sub.into_iter().map(|i| {
            let c = &cands[i];
            SubEntry { id: c.id, label: c.label, j_cls: c.j_cls }
        }));
        buffer.sim.extend(sim.into_iter().map(|i| cands[i].id));
        report.parts.push(part);
    }
    report.total_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((buffer, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Uniform sample, class-balanced.
    Random,
    /// iCaRL herding toward each class's mean embedding.
    Herding,
}

/// Class-balanced baseline buffer of `m` old-class training nodes.
pub fn baseline_select(
    kind: BaselineKind,
    data: &PeriodData,
    prev: &Snapshot,
    m: usize,
    seed: u64,
) -> Result<ReplayBuffer> {
    let period = data.view.period_index;
    let ids = data.view.old_in(Split::Train);
    if ids.is_empty() {
        return Err(Error::Empty("no old-class training nodes to select from"));
    }
    let cands = score_candidates(data, &ids, prev, ErrorLoss::CrossEntropy)?;
    let mut by_class: BTreeMap<ClassId, Vec<&Candidate>> = BTreeMap::new();
    for c in &cands {
        by_class.entry(c.label).or_default().push(c);
    }
    let sizes: Vec<usize> = by_class.values().map(Vec::len).collect();
    let quotas = allocate_quotas(&sizes, m);

    let mut sub = Vec::new();
    for ((class, members), q) in by_class.into_iter().zip(quotas) {
        let picked: Vec<&Candidate> = match kind {
            BaselineKind::Random => {
                let mut rng = rng::stream(seed, &[rng::TAG_BASELINE, period as u64, class.0 as u64]);
                let mut shuffled = members.clone();
                shuffled.shuffle(&mut rng);
                shuffled.truncate(q);
                shuffled
            }
            BaselineKind::Herding => herding(&members, q).into_iter().map(|i| members[i]).collect(),
        };
        sub.extend(picked.into_iter().map(|c| SubEntry { id: c.id, label: c.label, j_cls: c.j_cls }));
    }
    Ok(ReplayBuffer {
        period,
        sub,
        sim: Vec::new(),
        kernel: None,
        config: serde_json::json!({ "baseline": kind, "m": m, "seed": seed }),
    })
}

/// Herding: the k-th pick minimises the distance between the class mean and
/// the mean of the first k picks. Ties go to the smallest node id.
pub fn herding(members: &[&Candidate], q: usize) -> Vec<usize> {
    if members.is_empty() {
        return Vec::new();
    }
    let dim = members[0].embedding.len();
    let mut mu = vec![0.0; dim];
    for c in members {
        for (m, x) in mu.iter_mut().zip(&c.embedding) {
            *m += x;
        }
    }
    mu.iter_mut().for_each(|m| *m /= members.len() as f64);

    let mut taken = vec![false; members.len()];
    let mut running = vec![0.0; dim];
    let mut picks = Vec::with_capacity(q);
    for k in 1..=q.min(members.len()) {
        let mut best: Option<(f64, NodeId, usize)> = None;
        for (i, c) in members.iter().enumerate().filter(|(i, _)| !taken[*i]) {
            let d: f64 = mu
                .iter()
                .zip(&running)
                .zip(&c.embedding)
                .map(|((m, r), e)| {
                    let diff = m - (r + e) / k as f64;
                    diff * diff
                })
                .sum();
            if best.is_none_or(|(b, id, _)| d < b || (d == b && c.id < id)) {
                best = Some((d, c.id, i));
            }
        }
        let (_, _, i) = best.unwrap();
        taken[i] = true;
        for (r, e) in running.iter_mut().zip(&members[i].embedding) {
            *r += e;
        }
        picks.push(i);
    }
    picks
}
