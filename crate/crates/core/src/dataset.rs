//! Per-period model inputs.

use std::collections::HashMap;

use crate::backbone::ContextIndex;
use crate::error::{Error, Result};
use crate::graph::{split_period_seeded, ClassId, NodeId, PeriodView, TemporalGraph};

/// A period's view together with the flattened model input of every node in
/// it. Contexts are taken at the end of the period.
#[derive(Clone, Debug)]
pub struct PeriodData {
    pub view: PeriodView,
    pub inputs: HashMap<NodeId, Vec<f64>>,
}

impl PeriodData {
    pub fn build(graph: &TemporalGraph, index: &ContextIndex<'_>, n: usize, split_seed: u64) -> Result<Self> {
        let view = split_period_seeded(graph, n, split_seed)?;
        let t_eval = graph.period(n)?.t_end;
        let mut inputs = HashMap::with_capacity(view.old_nodes.len() + view.new_nodes.len());
        for &id in view.old_nodes.iter().chain(&view.new_nodes) {
            inputs.insert(id, index.context(id, t_eval)?.input());
        }
        Ok(Self { view, inputs })
    }

    pub fn input(&self, id: NodeId) -> Result<&[f64]> {
        self.inputs
            .get(&id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidGraph(format!("node {id} is not part of period {}", self.view.period_index)))
    }

    pub fn label(&self, id: NodeId) -> Result<ClassId> {
        self.view
            .class_of(id)
            .ok_or_else(|| Error::InvalidGraph(format!("node {id} is not part of period {}", self.view.period_index)))
    }
}

/// Builds [`PeriodData`] for every period of a graph.
pub fn build_all(graph: &TemporalGraph, split_seed: u64) -> Result<Vec<PeriodData>> {
    let index = ContextIndex::new(graph);
    (1..=graph.num_periods()).map(|n| PeriodData::build(graph, &index, n, split_seed)).collect()
}
