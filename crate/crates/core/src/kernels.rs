//! RBF kernel, the biased squared-MMD estimator and its greedy witness.
//!
//! The kernel is `exp(-γ‖x − y‖)` on the plain Euclidean norm. Setting
//! `squared_distance` switches to the conventional `exp(-γ‖x − y‖²)`.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub gamma: f64,
    #[serde(default)]
    pub squared_distance: bool,
}

impl KernelParams {
    pub fn new(gamma: f64) -> Result<Self> {
        Self::with_distance(gamma, false)
    }

    pub fn with_distance(gamma: f64, squared_distance: bool) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::config(format!("kernel gamma must be positive and finite, got {gamma}")));
        }
        Ok(Self { gamma, squared_distance })
    }

    /// Kernel value without shape checks.
    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), y.len());
        let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        if self.squared_distance {
            (-self.gamma * sq).exp()
        } else {
            (-self.gamma * sq.sqrt()).exp()
        }
    }

    /// Adds `scale * ∂k(x, y)/∂x` to `out`. The unsquared kernel is not
    /// differentiable at `x == y`; the zero subgradient is used there.
    pub fn accumulate_grad_x(&self, x: &[f64], y: &[f64], scale: f64, out: &mut [f64]) {
        let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        let coef = if self.squared_distance {
            -2.0 * self.gamma * (-self.gamma * sq).exp()
        } else {
            let d = sq.sqrt();
            if d == 0.0 {
                return;
            }
            -self.gamma * (-self.gamma * d).exp() / d
        };
        for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
            *o += scale * coef * (a - b);
        }
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: y.len() });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(())
}

fn check_set<V: AsRef<[f64]>>(set: &[V], dim: usize) -> Result<()> {
    for v in set {
        let v = v.as_ref();
        if v.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: v.len() });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
    }
    Ok(())
}

pub fn rbf(x: &[f64], y: &[f64], p: &KernelParams) -> Result<f64> {
    check_pair(x, y)?;
    Ok(p.eval(x, y))
}

/// Sum of k(v, u) over `set`.
pub fn kernel_sum<V: AsRef<[f64]>>(v: &[f64], set: &[V], p: &KernelParams) -> f64 {
    set.iter().map(|u| p.eval(v, u.as_ref())).sum()
}

/// The three terms of the biased squared MMD between `a` and `b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MmdTerms {
    /// `(1/|A|²) ΣΣ_{A×A} k`
    pub self_a: f64,
    /// `(1/|B|²) ΣΣ_{B×B} k`
    pub self_b: f64,
    /// `-(2/(|A||B|)) ΣΣ_{A×B} k`
    pub cross: f64,
}

impl MmdTerms {
    pub fn total(&self) -> f64 {
        self.self_a + self.self_b + self.cross
    }
}

pub fn mmd_terms<V: AsRef<[f64]>, W: AsRef<[f64]>>(a: &[V], b: &[W], p: &KernelParams) -> Result<MmdTerms> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("mmd_sq needs two nonempty sets"));
    }
    let dim = a[0].as_ref().len();
    check_set(a, dim)?;
    check_set(b, dim)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let gram_sum = |s: &[&[f64]]| -> f64 {
        // Symmetric: diagonal once, off-diagonal twice.
        let mut acc = s.len() as f64 * p.eval(s[0], s[0]);
        for i in 0..s.len() {
            for j in (i + 1)..s.len() {
                acc += 2.0 * p.eval(s[i], s[j]);
            }
        }
        acc
    };
    let av: Vec<&[f64]> = a.iter().map(|v| v.as_ref()).collect();
    let bv: Vec<&[f64]> = b.iter().map(|v| v.as_ref()).collect();
    let cross: f64 = av.iter().map(|x| kernel_sum(x, &bv, p)).sum();
    Ok(MmdTerms {
        self_a: gram_sum(&av) / (na * na),
        self_b: gram_sum(&bv) / (nb * nb),
        cross: -2.0 * cross / (na * nb),
    })
}

/// Biased (V-statistic) squared MMD, diagonal terms included.
pub fn mmd_sq<V: AsRef<[f64]>, W: AsRef<[f64]>>(a: &[V], b: &[W], p: &KernelParams) -> Result<f64> {
    mmd_terms(a, b, p).map(|t| t.total())
}

/// Greedy witness of candidate `v` against the current subset and the full
/// partition. The subset term is zero while the subset is empty.
pub fn j_mmd<V: AsRef<[f64]>, W: AsRef<[f64]>>(v: &[f64], sub: &[V], old: &[W], p: &KernelParams) -> Result<f64> {
    if old.is_empty() {
        return Err(Error::Empty("j_mmd needs a nonempty reference set"));
    }
    check_set(sub, v.len())?;
    check_set(old, v.len())?;
    let sub_term = if sub.is_empty() { 0.0 } else { 2.0 / sub.len() as f64 * kernel_sum(v, sub, p) };
    Ok(sub_term - 2.0 / old.len() as f64 * kernel_sum(v, old, p))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelBoundReport {
    pub max_offdiag: f64,
    pub bound: f64,
    pub satisfied: bool,
}

/// Checks the sufficient condition `0 ≤ k(v,u) ≤ k(v,v)/(n³−2n²−2n−3)` under
/// which the squared MMD is submodular in the subset. Reported, not enforced.
pub fn kernel_bound_check<V: AsRef<[f64]>>(
    embeddings: &[V],
    p: &KernelParams,
    n_ref: usize,
) -> Result<KernelBoundReport> {
    if n_ref <= 3 {
        return Err(Error::config(format!("n_ref must be at least 4, got {n_ref}")));
    }
    if embeddings.len() < 2 {
        return Err(Error::Empty("kernel_bound_check needs two points"));
    }
    check_set(embeddings, embeddings[0].as_ref().len())?;
    let n = n_ref as f64;
    let denom = n * n * n - 2.0 * n * n - 2.0 * n - 3.0;
    let mut max_offdiag = 0.0f64;
    let mut min_ratio = f64::INFINITY;
    for i in 0..embeddings.len() {
        let x = embeddings[i].as_ref();
        let self_k = p.eval(x, x);
        for (j, y) in embeddings.iter().enumerate() {
            if i != j {
                let k = p.eval(x, y.as_ref());
                max_offdiag = max_offdiag.max(k);
                min_ratio = min_ratio.min(self_k / denom - k);
            }
        }
    }
    // RBF has k(v, v) = 1, so the bound is uniform.
    let bound = 1.0 / denom;
    Ok(KernelBoundReport { max_offdiag, bound, satisfied: min_ratio >= 0.0 })
}

/// Median-heuristic bandwidth on the Euclidean norm: `γ = 1 / median ‖x − y‖`.
pub fn median_heuristic_gamma<V: AsRef<[f64]>>(embeddings: &[V], seed: u64) -> Result<KernelParams> {
    median_heuristic(embeddings, seed, false)
}

pub const MEDIAN_SAMPLE: usize = 1000;

/// Median heuristic over a seeded sample of at most [`MEDIAN_SAMPLE`] points.
/// With `squared_distance` the median of squared distances is used so that
/// the kernel exponent stays of order one. Falls back to `γ = 1` when all
/// sampled points coincide.
pub fn median_heuristic<V: AsRef<[f64]>>(embeddings: &[V], seed: u64, squared_distance: bool) -> Result<KernelParams> {
    if embeddings.len() < 2 {
        return Err(Error::Empty("median heuristic needs two points"));
    }
    check_set(embeddings, embeddings[0].as_ref().len())?;
    let picked: Vec<&[f64]> = if embeddings.len() > MEDIAN_SAMPLE {
        let mut rng = rng::stream(seed, &[rng::TAG_GAMMA]);
        let mut idx = index::sample(&mut rng, embeddings.len(), MEDIAN_SAMPLE).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| embeddings[i].as_ref()).collect()
    } else {
        embeddings.iter().map(|v| v.as_ref()).collect()
    };
    let mut d = Vec::with_capacity(picked.len() * (picked.len() - 1) / 2);
    for i in 0..picked.len() {
        for j in (i + 1)..picked.len() {
            let sq: f64 = picked[i].iter().zip(picked[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d.push(if squared_distance { sq } else { sq.sqrt() });
        }
    }
    let med = median(&mut d);
    let gamma = if med > 0.0 { 1.0 / med } else { 1.0 };
    KernelParams::with_distance(gamma, squared_distance)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
