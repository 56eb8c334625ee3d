//! Event-based temporal graphs split into class-incremental periods.
//!
//! A [`TemporalGraph`] holds node records with static features, time-stamped
//! interaction events and the period table. Each period introduces a disjoint
//! set of classes. [`split_period`] decomposes one period into its old-class
//! and new-class parts: nodes are separated by class, while an event joining
//! an old node to a new node belongs to both parts.

mod io;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use io::{load_graph, load_graph_with_periods, save_graph, EVENT_FILE, NODE_FILE, PERIOD_FILE};
pub use synth::{generate_synthetic, NoiseKind, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::fmt::Display for ClassId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub src: NodeId,
    pub dst: NodeId,
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: NodeId,
    pub class: ClassId,
    /// Period in which this node record first appears. For an old class this
    /// is later than the period that introduced the class.
    pub birth_period: usize,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodSpec {
    /// 1-based.
    pub index: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub classes: Vec<ClassId>,
}

/// Validated temporal graph. Immutable after construction.
#[derive(Clone, Debug)]
pub struct TemporalGraph {
    nodes: Vec<NodeRecord>,
    events: Vec<Event>,
    periods: Vec<PeriodSpec>,
    index: HashMap<NodeId, usize>,
    class_period: HashMap<ClassId, usize>,
    feature_dim: usize,
}

impl PartialEq for TemporalGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.events == other.events && self.periods == other.periods
    }
}

impl TemporalGraph {
    /// Validates and builds a graph. Events are stably sorted by timestamp.
    pub fn new(nodes: Vec<NodeRecord>, mut events: Vec<Event>, periods: Vec<PeriodSpec>) -> Result<Self> {
        let invalid = |msg: String| Err(Error::InvalidGraph(msg));

        if periods.is_empty() {
            return invalid("no periods".into());
        }
        let mut class_period = HashMap::new();
        for (i, p) in periods.iter().enumerate() {
            if p.index != i + 1 {
                return invalid(format!("period at position {} has index {}", i, p.index));
            }
            if !(p.t_start.is_finite() && p.t_end.is_finite() && p.t_start < p.t_end) {
                return invalid(format!("period {} has an empty or non-finite span", p.index));
            }
            if i > 0 && periods[i - 1].t_end != p.t_start {
                return invalid(format!("periods {} and {} are not contiguous", i, p.index));
            }
            for &c in &p.classes {
                if let Some(prev) = class_period.insert(c, p.index) {
                    return invalid(format!("class {} appears in periods {} and {}", c, prev, p.index));
                }
            }
        }

        let feature_dim = nodes.first().map_or(0, |n| n.feature.len());
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id, i).is_some() {
                return invalid(format!("duplicate node id {}", n.id));
            }
            if n.feature.len() != feature_dim {
                return Err(Error::DimensionMismatch { expected: feature_dim, got: n.feature.len() });
            }
            if n.feature.iter().any(|x| !x.is_finite()) {
                return invalid(format!("node {} has a non-finite feature", n.id));
            }
            let Some(&intro) = class_period.get(&n.class) else {
                return invalid(format!("node {} has class {} which no period introduces", n.id, n.class));
            };
            if n.birth_period == 0 || n.birth_period > periods.len() {
                return invalid(format!("node {} has birth period {} outside the period table", n.id, n.birth_period));
            }
            if intro > n.birth_period {
                return invalid(format!(
                    "node {} is born in period {} but its class {} is introduced in period {}",
                    n.id, n.birth_period, n.class, intro
                ));
            }
        }

        for e in &events {
            if e.src == e.dst {
                return invalid(format!("self-loop event on node {}", e.src));
            }
            for end in [e.src, e.dst] {
                if !index.contains_key(&end) {
                    return invalid(format!("event references unknown node {}", end));
                }
            }
            if period_containing(&periods, e.t).is_none() {
                return invalid(format!("event timestamp {} lies outside every period", e.t));
            }
        }
        events.sort_by(|a, b| a.t.total_cmp(&b.t));

        Ok(Self { nodes, events, periods, index, class_period, feature_dim })
    }

    pub fn nodes(&self) -> &[NodeRecord] {
        &self.nodes
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn periods(&self) -> &[PeriodSpec] {
        &self.periods
    }

    pub fn num_periods(&self) -> usize {
        self.periods.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeRecord> {
        self.index.get(&id).map(|&i| &self.nodes[i])
    }

    pub fn node_index(&self, id: NodeId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// Period that introduced `class`.
    pub fn class_period(&self, class: ClassId) -> Option<usize> {
        self.class_period.get(&class).copied()
    }

    pub fn period(&self, n: usize) -> Result<&PeriodSpec> {
        n.checked_sub(1).and_then(|i| self.periods.get(i)).ok_or(Error::UnknownPeriod(n))
    }

    /// Period index whose span contains `t`.
    pub fn period_of(&self, t: f64) -> Option<usize> {
        period_containing(&self.periods, t)
    }

    /// Events with timestamp inside period `n`, in time order.
    pub fn period_events(&self, n: usize) -> Result<&[Event]> {
        let p = self.period(n)?;
        let last = n == self.periods.len();
        let lo = self.events.partition_point(|e| e.t < p.t_start);
        let hi = if last {
            self.events.partition_point(|e| e.t <= p.t_end)
        } else {
            self.events.partition_point(|e| e.t < p.t_end)
        };
        Ok(&self.events[lo..hi])
    }

    /// Classes introduced in periods `1..=n`, in period order.
    pub fn classes_up_to(&self, n: usize) -> Vec<ClassId> {
        self.periods.iter().take(n).flat_map(|p| p.classes.iter().copied()).collect()
    }
}

fn period_containing(periods: &[PeriodSpec], t: f64) -> Option<usize> {
    let last = periods.len();
    periods.iter().find(|p| t >= p.t_start && (t < p.t_end || (p.index == last && t == p.t_end))).map(|p| p.index)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

pub const TRAIN_FRACTION: f64 = 0.8;
pub const VAL_FRACTION: f64 = 0.1;
pub const DEFAULT_SPLIT_SEED: u64 = 0;

/// Per-node train/val/test assignment, stratified by class.
///
/// The assignment is a property of the node, not of the period, so a test node
/// is never trained on in any period.
pub fn assign_splits(graph: &TemporalGraph, seed: u64) -> HashMap<NodeId, Split> {
    let mut by_class: BTreeMap<ClassId, Vec<NodeId>> = BTreeMap::new();
    for n in graph.nodes() {
        by_class.entry(n.class).or_default().push(n.id);
    }
    let mut out = HashMap::with_capacity(graph.nodes().len());
    for (class, mut ids) in by_class {
        ids.sort_unstable();
        let mut rng = rng::stream(seed, &[rng::TAG_SPLIT, class.0 as u64]);
        ids.shuffle(&mut rng);
        let n = ids.len();
        let n_train = (TRAIN_FRACTION * n as f64).round() as usize;
        let n_val = ((VAL_FRACTION * n as f64).round() as usize).min(n - n_train);
        for (i, id) in ids.into_iter().enumerate() {
            let s = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            out.insert(id, s);
        }
    }
    out
}

/// Old/new decomposition of one period.
#[derive(Clone, Debug)]
pub struct PeriodView {
    pub period_index: usize,
    pub old_classes: Vec<ClassId>,
    pub new_classes: Vec<ClassId>,
    /// Sorted by id.
    pub old_nodes: Vec<NodeId>,
    /// Sorted by id.
    pub new_nodes: Vec<NodeId>,
    pub events_old: Vec<Event>,
    pub events_new: Vec<Event>,
    pub splits: BTreeMap<NodeId, Split>,
    class_set: HashMap<ClassId, usize>,
    node_class: HashMap<NodeId, ClassId>,
}

impl PeriodView {
    pub fn split_of(&self, id: NodeId) -> Option<Split> {
        self.splits.get(&id).copied()
    }

    pub fn class_of(&self, id: NodeId) -> Option<ClassId> {
        self.node_class.get(&id).copied()
    }

    /// Index `i` (1-based) of the period that introduced the node's class.
    pub fn class_set_of(&self, id: NodeId) -> Option<usize> {
        self.class_of(id).and_then(|c| self.class_set.get(&c).copied())
    }

    fn filter(&self, ids: &[NodeId], split: Split) -> Vec<NodeId> {
        ids.iter().copied().filter(|id| self.splits.get(id) == Some(&split)).collect()
    }

    pub fn old_in(&self, split: Split) -> Vec<NodeId> {
        self.filter(&self.old_nodes, split)
    }

    pub fn new_in(&self, split: Split) -> Vec<NodeId> {
        self.filter(&self.new_nodes, split)
    }

    /// All nodes of the period (old then new) in the given split.
    pub fn all_in(&self, split: Split) -> Vec<NodeId> {
        let mut v = self.old_in(split);
        v.extend(self.new_in(split));
        v
    }

    /// Nodes in `split` whose class was introduced in period `set`.
    pub fn set_members(&self, set: usize, split: Split) -> Vec<NodeId> {
        let ids = if set == self.period_index { &self.new_nodes } else { &self.old_nodes };
        ids.iter()
            .copied()
            .filter(|id| self.splits.get(id) == Some(&split) && self.class_set_of(*id) == Some(set))
            .collect()
    }
}

/// Old/new decomposition of period `n` using the default split seed.
pub fn split_period(graph: &TemporalGraph, n: usize) -> Result<PeriodView> {
    split_period_seeded(graph, n, DEFAULT_SPLIT_SEED)
}

/// Old/new decomposition of period `n`.
///
/// A node belongs to the period when it is incident to at least one event in
/// the period's span; it is old when its class was introduced earlier.
pub fn split_period_seeded(graph: &TemporalGraph, n: usize, split_seed: u64) -> Result<PeriodView> {
    let spec = graph.period(n)?;
    let events = graph.period_events(n)?;
    if events.is_empty() {
        return Err(Error::EmptyPeriod(n));
    }
    let old_classes = graph.classes_up_to(n - 1);
    let new_classes = spec.classes.clone();

    let class_of = |id: NodeId| graph.node(id).expect("validated endpoint").class;
    let is_new = |id: NodeId| graph.class_period(class_of(id)) == Some(n);

    let mut old_nodes = BTreeSet::new();
    let mut new_nodes = BTreeSet::new();
    let mut events_old = Vec::new();
    let mut events_new = Vec::new();
    for e in events {
        let (src_new, dst_new) = (is_new(e.src), is_new(e.dst));
        for (id, new) in [(e.src, src_new), (e.dst, dst_new)] {
            if new {
                new_nodes.insert(id);
            } else {
                old_nodes.insert(id);
            }
        }
        if !src_new || !dst_new {
            events_old.push(*e);
        }
        if src_new || dst_new {
            events_new.push(*e);
        }
    }

    let all_splits = assign_splits(graph, split_seed);
    let mut splits = BTreeMap::new();
    let mut node_class = HashMap::new();
    for &id in old_nodes.iter().chain(new_nodes.iter()) {
        splits.insert(id, all_splits[&id]);
        node_class.insert(id, class_of(id));
    }
    let class_set = graph.periods().iter().take(n).flat_map(|p| p.classes.iter().map(move |&c| (c, p.index))).collect();

    Ok(PeriodView {
        period_index: n,
        old_classes,
        new_classes,
        old_nodes: old_nodes.into_iter().collect(),
        new_nodes: new_nodes.into_iter().collect(),
        events_old,
        events_new,
        splits,
        class_set,
        node_class,
    })
}
