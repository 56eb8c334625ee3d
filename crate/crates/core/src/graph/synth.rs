//! Synthetic temporal graphs with drifting old classes.
//!
//! Every class is a Gaussian cluster in feature space. In each period every
//! class introduced so far receives a fresh batch of nodes; an old class's
//! center is translated by `drift_step` along a fixed random direction per
//! elapsed period, so old-class data in period `n` is distributed differently
//! from the data the previous model was trained on.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ClassId, Event, NodeId, NodeRecord, PeriodSpec, TemporalGraph};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_periods: usize,
    pub classes_per_period: usize,
    pub nodes_per_class_per_period: usize,
    pub feature_dim: usize,
    pub class_center_scale: f64,
    pub drift_step: f64,
    pub noise_sigma: f64,
    pub intra_class_edge_prob: f64,
    pub inter_class_edge_prob: f64,
    pub events_per_node: usize,
    pub seed: u64,
    /// Sub-clusters per class. Each mode is offset from the class center by
    /// `mode_spread` times a standard normal vector scaled to unit expected norm.
    #[serde(default = "one")]
    pub modes_per_class: usize,
    #[serde(default)]
    pub mode_spread: f64,
    /// Fraction of nodes whose recorded class is replaced by a different
    /// class active in the same period.
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default = "default_noise_kind")]
    pub label_noise_kind: NoiseKind,
    #[serde(default = "default_period_length")]
    pub period_length: f64,
}

/// How a noisy label is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Uniform over the other active classes.
    Uniform,
    /// Always the next class id, cyclic over the active classes.
    Pair,
}

fn default_noise_kind() -> NoiseKind {
    NoiseKind::Uniform
}

fn one() -> usize {
    1
}

fn default_period_length() -> f64 {
    100.0
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_periods: 3,
            classes_per_period: 3,
            nodes_per_class_per_period: 200,
            feature_dim: 16,
            class_center_scale: 3.0,
            drift_step: 1.0,
            noise_sigma: 1.0,
            intra_class_edge_prob: 0.7,
            inter_class_edge_prob: 0.3,
            events_per_node: 4,
            seed: 0,
            modes_per_class: 1,
            mode_spread: 0.0,
            label_noise: 0.0,
            label_noise_kind: NoiseKind::Uniform,
            period_length: default_period_length(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::config(format!("synthetic: {m}")));
        if self.num_periods == 0 {
            return err("num_periods must be at least 1");
        }
        if self.classes_per_period == 0 || self.nodes_per_class_per_period == 0 {
            return err("zero nodes requested");
        }
        if self.feature_dim == 0 {
            return err("feature_dim must be at least 1");
        }
        if self.modes_per_class == 0 {
            return err("modes_per_class must be at least 1");
        }
        if !(self.drift_step >= 0.0) || !(self.mode_spread >= 0.0) {
            return err("drift_step and mode_spread must be non-negative");
        }
        if !(self.noise_sigma > 0.0) {
            return err("noise_sigma must be positive");
        }
        if !(self.class_center_scale >= 0.0) || !(self.period_length > 0.0) {
            return err("class_center_scale must be non-negative and period_length positive");
        }
        for (name, p) in [
            ("intra_class_edge_prob", self.intra_class_edge_prob),
            ("inter_class_edge_prob", self.inter_class_edge_prob),
            ("label_noise", self.label_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return err(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.intra_class_edge_prob + self.inter_class_edge_prob <= 0.0 {
            return err("at least one edge probability must be positive");
        }
        if self.events_per_node == 0 {
            return err("events_per_node must be at least 1");
        }
        if self.classes_per_period * self.nodes_per_class_per_period < 2 {
            return err("a period needs at least two nodes to host an event");
        }
        Ok(())
    }
}

struct ClassModel {
    intro: usize,
    modes: Vec<Vec<f64>>,
    direction: Vec<f64>,
}

fn gaussian_vec<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let s: f64 = StandardNormal.sample(rng);
            scale * s
        })
        .collect::<Vec<f64>>()
}

/// Generates a synthetic temporal graph. Deterministic given `cfg.seed`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<TemporalGraph> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, &[0x5e17]);
    let dim = cfg.feature_dim;
    let norm = 1.0 / (dim as f64).sqrt();

    let total_classes = cfg.num_periods * cfg.classes_per_period;
    let classes: Vec<ClassModel> = (0..total_classes)
        .map(|c| {
            let center = gaussian_vec(&mut rng, dim, cfg.class_center_scale * norm);
            let modes = (0..cfg.modes_per_class)
                .map(|_| {
                    let off = gaussian_vec(&mut rng, dim, cfg.mode_spread * norm);
                    center.iter().zip(&off).map(|(a, b)| a + b).collect()
                })
                .collect();
            let mut direction = gaussian_vec(&mut rng, dim, 1.0);
            let len = direction.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            direction.iter_mut().for_each(|x| *x /= len);
            ClassModel { intro: c / cfg.classes_per_period + 1, modes, direction }
        })
        .collect();

    let periods: Vec<PeriodSpec> = (1..=cfg.num_periods)
        .map(|n| PeriodSpec {
            index: n,
            t_start: (n - 1) as f64 * cfg.period_length,
            t_end: n as f64 * cfg.period_length,
            classes: (0..cfg.classes_per_period)
                .map(|k| ClassId(((n - 1) * cfg.classes_per_period + k) as u32))
                .collect(),
        })
        .collect();

    let mut nodes = Vec::new();
    let mut events = Vec::new();
    let mut next_id = 0u32;
    for spec in &periods {
        let n = spec.index;
        let active = n * cfg.classes_per_period;
        // (node id, cluster the feature was drawn from)
        let mut members: Vec<Vec<NodeId>> = vec![Vec::new(); active];
        for (c, model) in classes.iter().enumerate().take(active) {
            let shift = cfg.drift_step * (n - model.intro) as f64;
            for _ in 0..cfg.nodes_per_class_per_period {
                let mode = &model.modes[rng.random_range(0..model.modes.len())];
                let feature = mode
                    .iter()
                    .zip(&model.direction)
                    .map(|(m, d)| {
                        m + shift * d + {
                            let s: f64 = StandardNormal.sample(&mut rng);
                            cfg.noise_sigma * s
                        }
                    })
                    .collect();
                let mut class = c;
                if cfg.label_noise > 0.0 && active > 1 && rng.random::<f64>() < cfg.label_noise {
                    class = match cfg.label_noise_kind {
                        NoiseKind::Uniform => {
                            let other = rng.random_range(0..active - 1);
                            if other >= c {
                                other + 1
                            } else {
                                other
                            }
                        }
                        NoiseKind::Pair => (c + 1) % active,
                    };
                }
                let id = NodeId(next_id);
                next_id += 1;
                members[c].push(id);
                nodes.push(NodeRecord { id, class: ClassId(class as u32), birth_period: n, feature });
            }
        }

        let p_intra = cfg.intra_class_edge_prob / (cfg.intra_class_edge_prob + cfg.inter_class_edge_prob);
        for c in 0..active {
            for &u in &members[c] {
                for _ in 0..cfg.events_per_node {
                    let same = rng.random::<f64>() < p_intra;
                    let partner = if (same && members[c].len() > 1) || active == 1 {
                        let k = rng.random_range(0..members[c].len() - 1);
                        let v = members[c][k];
                        if v == u {
                            *members[c].last().unwrap()
                        } else {
                            v
                        }
                    } else {
                        let other = rng.random_range(0..active - 1);
                        let oc = if other >= c { other + 1 } else { other };
                        members[oc][rng.random_range(0..members[oc].len())]
                    };
                    let t = spec.t_start + rng.random::<f64>() * cfg.period_length;
                    events.push(Event { src: u, dst: partner, t });
                }
            }
        }
    }

    TemporalGraph::new(nodes, events, periods)
}
