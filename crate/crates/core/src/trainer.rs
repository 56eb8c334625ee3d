//! Per-period training and strategy orchestration.

use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, EmbeddingLoss, Grads, Model, Params, Snapshot, DEFAULT_HIDDEN};
use crate::dataset::{self, PeriodData};
use crate::error::{Error, Result};
use crate::graph::{NodeId, Split, TemporalGraph};
use crate::kernels::{self, KernelParams};
use crate::metrics::{self, PeriodRecord, RunRecord};
use crate::rng;
use crate::selector::{self, BaselineKind, ReplayBuffer, SelectionConfig, SelectionReport, SelectionTerms};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Joint,
    Finetune,
    Er,
    Icarl,
    Ltf,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::Joint, Strategy::Finetune, Strategy::Er, Strategy::Icarl, Strategy::Ltf];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Joint => "joint",
            Strategy::Finetune => "finetune",
            Strategy::Er => "er",
            Strategy::Icarl => "icarl",
            Strategy::Ltf => "ltf",
        }
    }

    pub fn uses_replay(self) -> bool {
        matches!(self, Strategy::Er | Strategy::Icarl | Strategy::Ltf)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    ErrOnly,
    DistOnly,
    Both,
    BothPlusLdst,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::ErrOnly, Ablation::DistOnly, Ablation::Both, Ablation::BothPlusLdst];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::ErrOnly => "err_only",
            Ablation::DistOnly => "dist_only",
            Ablation::Both => "both",
            Ablation::BothPlusLdst => "both_plus_ldst",
        }
    }

    pub fn selection_terms(self) -> SelectionTerms {
        match self {
            Ablation::ErrOnly => SelectionTerms::ErrorOnly,
            Ablation::DistOnly => SelectionTerms::DistributionOnly,
            Ablation::Both | Ablation::BothPlusLdst => SelectionTerms::Both,
        }
    }
}

/// When the frozen coverage-subset embeddings are recomputed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimRefresh {
    Epoch,
    Step,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub ablation: Ablation,
    #[serde(default = "default_refresh")]
    pub sim_refresh: SimRefresh,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
}

fn default_refresh() -> SimRefresh {
    SimRefresh::Epoch
}

fn default_hidden() -> usize {
    DEFAULT_HIDDEN
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            lr: 1e-3,
            epochs: 100,
            batch_size: 600,
            patience: 20,
            seed: 0,
            strategy: Strategy::Ltf,
            ablation: Ablation::BothPlusLdst,
            sim_refresh: SimRefresh::Epoch,
            hidden_dim: DEFAULT_HIDDEN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("train.beta must be a non-negative number"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden_dim == 0 {
            return Err(Error::config("train.epochs, train.batch_size and train.hidden_dim must be at least 1"));
        }
        Ok(())
    }

    fn uses_dist_loss(&self) -> bool {
        self.strategy == Strategy::Ltf && self.ablation == Ablation::BothPlusLdst && self.beta > 0.0
    }
}

/// `weight · (−s · Σ_{v ∈ sub} Σ_{u ∈ sim} k(v, u))` with `s = 2/(|sub|·|sim|)`.
/// The coverage embeddings are constants.
pub struct DistLoss<'a> {
    pub sim: &'a [Vec<f64>],
    pub kernel: KernelParams,
    pub weight: f64,
}

impl EmbeddingLoss for DistLoss<'_> {
    fn value_and_grad(&self, sub: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
        if sub.is_empty() || self.sim.is_empty() {
            return Err(Error::Empty("distribution loss needs non-empty replay and coverage sets"));
        }
        let s = 2.0 / (sub.len() * self.sim.len()) as f64;
        let mut value = 0.0;
        let mut grads = Vec::with_capacity(sub.len());
        for v in sub {
            let mut g = vec![0.0; v.len()];
            for u in self.sim {
                if u.len() != v.len() {
                    return Err(Error::DimensionMismatch { expected: v.len(), got: u.len() });
                }
                value += self.kernel.eval(v, u);
                self.kernel.accumulate_grad_x(v, u, -s * self.weight, &mut g);
            }
            grads.push(g);
        }
        Ok((-s * self.weight * value, grads))
    }
}

/// The distribution loss and its parameter gradients, flowing through the
/// replay side only.
pub fn l_dst(
    params: &Params,
    sub_inputs: &[&[f64]],
    sim_embeddings: &[Vec<f64>],
    kernel: KernelParams,
) -> Result<(f64, Grads)> {
    let term = DistLoss { sim: sim_embeddings, kernel, weight: 1.0 };
    params.embedding_loss_and_grads(sub_inputs, &term)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub period: usize,
    pub epoch: usize,
    pub step: usize,
    pub loss_new: f64,
    pub loss_sub: f64,
    pub l_dst: f64,
    pub l_tot: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub period: usize,
    pub epoch: usize,
    pub loss_new: f64,
    pub loss_sub: f64,
    pub l_dst: f64,
    pub val_ap: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PeriodTrainLog {
    pub epochs: Vec<EpochLog>,
    pub batches: Vec<BatchLog>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_ap: f64,
}

/// Validation AP over every class set seen so far.
pub fn validation_ap(params: &Params, data: &PeriodData) -> Result<f64> {
    let p = metrics::set_precisions(params, data, Split::Val)?;
    metrics::ap(data.view.period_index, &p)
}

fn kernel_for(buffer: &ReplayBuffer, sim_embeddings: &[Vec<f64>], seed: u64) -> Result<KernelParams> {
    match buffer.kernel {
        Some(k) => Ok(k),
        None if sim_embeddings.len() >= 2 => kernels::median_heuristic_gamma(sim_embeddings, seed),
        None => KernelParams::new(1.0),
    }
}

/// Trains `model` on one period and leaves it at the best-validation
/// parameters. The head must already cover the period's classes.
pub fn train_period(
    model: &mut Backbone,
    data: &PeriodData,
    buffer: Option<&ReplayBuffer>,
    cfg: &TrainConfig,
) -> Result<PeriodTrainLog> {
    cfg.validate()?;
    let period = data.view.period_index;
    for c in data.view.old_classes.iter().chain(&data.view.new_classes) {
        if model.params().class_index(*c).is_none() {
            return Err(Error::UnknownClass(c.0));
        }
    }
    if let Some(b) = buffer {
        if b.period != period {
            return Err(Error::BufferPeriod { built: b.period, expected: period });
        }
    }

    let primary: Vec<NodeId> =
        if cfg.strategy == Strategy::Joint { data.view.all_in(Split::Train) } else { data.view.new_in(Split::Train) };
    if primary.is_empty() {
        return Err(Error::Empty("no training nodes for this period"));
    }
    let labelled = |ids: &[NodeId]| -> Result<Vec<(&[f64], usize)>> {
        ids.iter()
            .map(|&id| {
                let c = data.label(id)?;
                let row = model.params().class_index(c).ok_or(Error::UnknownClass(c.0))?;
                Ok((data.input(id)?, row))
            })
            .collect()
    };
    let primary_set = labelled(&primary)?;
    let sub_ids: Vec<NodeId> = buffer.map(|b| b.sub.iter().map(|e| e.id).collect()).unwrap_or_default();
    let sub_set = labelled(&sub_ids)?;
    let sim_inputs: Vec<&[f64]> = match buffer {
        Some(b) if cfg.uses_dist_loss() => b.sim.iter().map(|&id| data.input(id)).collect::<Result<_>>()?,
        _ => Vec::new(),
    };
    let use_dist = cfg.uses_dist_loss() && !sub_set.is_empty() && !sim_inputs.is_empty();

    let mut rng = rng::stream(cfg.seed, &[rng::TAG_TRAIN, period as u64]);
    let mut log = PeriodTrainLog { best_val_ap: f64::NEG_INFINITY, ..Default::default() };
    let mut best = model.snapshot();
    let mut kernel: Option<KernelParams> = None;
    let sub_batch = cfg.batch_size.min(sub_set.len());

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..primary_set.len()).collect();
        order.shuffle(&mut rng);
        let mut sub_order: Vec<usize> = (0..sub_set.len()).collect();
        sub_order.shuffle(&mut rng);
        let mut sub_cursor = 0;

        let embed_sim = |p: &Params| -> Result<Vec<Vec<f64>>> { sim_inputs.iter().map(|z| p.embed_input(z)).collect() };
        let mut sim_emb = if use_dist { embed_sim(model.params())? } else { Vec::new() };
        if use_dist && kernel.is_none() {
            kernel = Some(kernel_for(buffer.unwrap(), &sim_emb, cfg.seed)?);
        }

        let (mut sum_new, mut sum_sub, mut sum_dst) = (0.0, 0.0, 0.0);
        let steps = primary_set.len().div_ceil(cfg.batch_size);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| primary_set[i]).collect();
            let (new_parts, mut grads) = model.params().loss_and_grads(&batch, None)?;

            let (mut loss_sub, mut dst) = (0.0, 0.0);
            if sub_batch > 0 {
                let sb: Vec<(&[f64], usize)> =
                    (0..sub_batch).map(|k| sub_set[sub_order[(sub_cursor + k) % sub_set.len()]]).collect();
                sub_cursor = (sub_cursor + sub_batch) % sub_set.len();
                if use_dist && cfg.sim_refresh == SimRefresh::Step && step > 0 {
                    sim_emb = embed_sim(model.params())?;
                }
                let term = use_dist.then(|| DistLoss { sim: &sim_emb, kernel: kernel.unwrap(), weight: cfg.beta });
                let (sub_parts, sub_grads) =
                    model.params().loss_and_grads(&sb, term.as_ref().map(|t| t as &dyn EmbeddingLoss))?;
                grads.add_scaled(&sub_grads, 1.0);
                loss_sub = sub_parts.ce;
                if use_dist {
                    dst = sub_parts.aux / cfg.beta;
                }
            }
            let l_tot = new_parts.ce + loss_sub + cfg.beta * dst;
            log.batches.push(BatchLog { period, epoch, step, loss_new: new_parts.ce, loss_sub, l_dst: dst, l_tot });
            sum_new += new_parts.ce;
            sum_sub += loss_sub;
            sum_dst += dst;
            model.apply(&grads, cfg.lr)?;
        }
        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;

        let val_ap = validation_ap(model.params(), data)?;
        let n = steps as f64;
        log.epochs.push(EpochLog {
            period,
            epoch,
            loss_new: sum_new / n,
            loss_sub: sum_sub / n,
            l_dst: sum_dst / n,
            val_ap,
            wall_ms,
        });
        debug!("period {period} epoch {epoch}: loss_new {:.4} val_ap {val_ap:.4}", sum_new / n);
        if val_ap > log.best_val_ap {
            log.best_val_ap = val_ap;
            log.best_epoch = epoch;
            best = model.snapshot();
        } else if epoch - log.best_epoch >= cfg.patience {
            break;
        }
    }
    model.restore(&best);
    Ok(log)
}

/// Everything a strategy run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub record: RunRecord,
    /// Model after each period.
    pub snapshots: Vec<Snapshot>,
    pub logs: Vec<PeriodTrainLog>,
    /// Replay buffers for periods 2..=N (replay strategies only).
    pub buffers: Vec<ReplayBuffer>,
    pub selection_reports: Vec<SelectionReport>,
}

/// Runs one strategy over every period of `graph`. With a joint reference,
/// AF is filled in; a joint run is its own reference.
pub fn run_strategy(
    graph: &TemporalGraph,
    sel_cfg: &SelectionConfig,
    train_cfg: &TrainConfig,
    joint_ref: Option<&RunRecord>,
) -> Result<RunOutput> {
    train_cfg.validate()?;
    if train_cfg.strategy == Strategy::Ltf {
        sel_cfg.validate()?;
    }
    let data = dataset::build_all(graph, train_cfg.seed)?;
    run_strategy_on(&data, graph.feature_dim(), sel_cfg, train_cfg, joint_ref)
}

/// [`run_strategy`] on prebuilt period data.
pub fn run_strategy_on(
    data: &[PeriodData],
    feature_dim: usize,
    sel_cfg: &SelectionConfig,
    train_cfg: &TrainConfig,
    joint_ref: Option<&RunRecord>,
) -> Result<RunOutput> {
    let strategy = train_cfg.strategy;
    let mut sel = sel_cfg.clone();
    sel.terms = train_cfg.ablation.selection_terms();

    let mut model = Backbone::new(feature_dim, train_cfg.hidden_dim, train_cfg.seed);
    let mut out = RunOutput {
        record: RunRecord {
            strategy: strategy.name().into(),
            ablation: if strategy == Strategy::Ltf { train_cfg.ablation.name() } else { "none" }.into(),
            seed: train_cfg.seed,
            periods: Vec::new(),
            config: serde_json::json!({ "sel": sel, "train": train_cfg }),
        },
        snapshots: Vec::new(),
        logs: Vec::new(),
        buffers: Vec::new(),
        selection_reports: Vec::new(),
    };

    for d in data {
        let n = d.view.period_index;
        let mut selection_ms = None;
        let buffer = if n >= 2 && strategy.uses_replay() {
            let prev = out.snapshots.last().expect("previous period snapshot");
            let t0 = Instant::now();
            let b = match strategy {
                Strategy::Ltf => {
                    let (b, report) = selector::select(d, prev, &sel)?;
                    out.selection_reports.push(report);
                    b
                }
                Strategy::Er => selector::baseline_select(BaselineKind::Random, d, prev, sel.m, train_cfg.seed)?,
                _ => selector::baseline_select(BaselineKind::Herding, d, prev, sel.m, train_cfg.seed)?,
            };
            selection_ms = Some(t0.elapsed().as_secs_f64() * 1e3);
            Some(b)
        } else {
            None
        };

        model.grow_head(&d.view.new_classes)?;
        let log = train_period(&mut model, d, buffer.as_ref(), train_cfg)?;
        let precisions = metrics::set_precisions(model.params(), d, Split::Test)?;
        let ap = metrics::ap(n, &precisions)?;
        info!("{} seed {} period {n}: AP {ap:.4}", strategy.name(), train_cfg.seed);
        out.record.periods.push(PeriodRecord {
            period: n,
            af: None,
            ap,
            precisions,
            epoch_time_ms: log.epochs.iter().map(|e| e.wall_ms).collect(),
            selection_ms,
            epochs_run: log.epochs.len(),
            best_epoch: log.best_epoch,
        });
        out.snapshots.push(model.snapshot());
        out.logs.push(log);
        out.buffers.extend(buffer);
    }

    match joint_ref {
        Some(j) => out.record.attach_joint(j)?,
        None if strategy == Strategy::Joint => {
            let own = out.record.clone();
            out.record.attach_joint(&own)?;
        }
        None => {}
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_synthetic, SynthConfig};

    fn tiny_graph(periods: usize) -> TemporalGraph {
        generate_synthetic(&SynthConfig {
            num_periods: periods,
            classes_per_period: 2,
            nodes_per_class_per_period: 30,
            feature_dim: 4,
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn quick(strategy: Strategy) -> TrainConfig {
        TrainConfig { epochs: 5, batch_size: 32, lr: 0.05, hidden_dim: 8, strategy, ..TrainConfig::default() }
    }

    fn small_sel() -> SelectionConfig {
        SelectionConfig { m: 6, m_prime: 6, partition_size: 40, ..SelectionConfig::default() }
    }

    #[test]
    fn dist_loss_identical_sets() {
        let sim = vec![vec![1.0, 2.0], vec![1.0, 2.0]];
        let term = DistLoss { sim: &sim, kernel: KernelParams::new(0.5).unwrap(), weight: 1.0 };
        let (v, g) = term.value_and_grad(&sim).unwrap();
        assert!((v + 2.0).abs() < 1e-15);
        assert!(g.iter().flatten().all(|x| *x == 0.0));
        assert!(term.value_and_grad(&[]).is_err());
    }

    #[test]
    fn one_period_graph_is_strategy_independent() {
        let g = tiny_graph(1);
        let runs: Vec<RunOutput> =
            Strategy::ALL.iter().map(|&s| run_strategy(&g, &small_sel(), &quick(s), None).unwrap()).collect();
        for r in &runs[1..] {
            assert_eq!(r.snapshots, runs[0].snapshots);
            assert_eq!(r.record.periods[0].precisions, runs[0].record.periods[0].precisions);
        }
    }

    #[test]
    fn ltf_buffer_is_current_period_old_data() {
        let g = tiny_graph(3);
        let out = run_strategy(&g, &small_sel(), &quick(Strategy::Ltf), None).unwrap();
        assert_eq!(out.buffers.len(), 2);
        let data = dataset::build_all(&g, 0).unwrap();
        for b in &out.buffers {
            let view = &data[b.period - 1].view;
            for e in &b.sub {
                assert!(view.old_nodes.binary_search(&e.id).is_ok());
                assert_eq!(view.split_of(e.id), Some(Split::Train));
            }
            for id in &b.sim {
                assert!(view.old_nodes.binary_search(id).is_ok());
            }
        }
    }

    #[test]
    fn wrong_period_buffer_and_empty_train_set() {
        let g = tiny_graph(2);
        let data = dataset::build_all(&g, 0).unwrap();
        let mut model = Backbone::new(4, 8, 0);
        model.grow_head(&data[0].view.new_classes).unwrap();
        model.grow_head(&data[1].view.new_classes).unwrap();
        let b = ReplayBuffer { period: 1, sub: vec![], sim: vec![], kernel: None, config: serde_json::Value::Null };
        let err = train_period(&mut model, &data[1], Some(&b), &quick(Strategy::Er)).unwrap_err();
        assert!(matches!(err, Error::BufferPeriod { built: 1, expected: 2 }));

        let mut fresh = Backbone::new(4, 8, 0);
        assert!(matches!(
            train_period(&mut fresh, &data[0], None, &quick(Strategy::Finetune)),
            Err(Error::UnknownClass(_))
        ));
    }

    #[test]
    fn early_stopping_keeps_best_checkpoint() {
        let g = tiny_graph(1);
        let data = dataset::build_all(&g, 0).unwrap();
        let cfg = TrainConfig { epochs: 60, patience: 3, ..quick(Strategy::Finetune) };
        let mut model = Backbone::new(4, 8, 0);
        model.grow_head(&data[0].view.new_classes).unwrap();
        let log = train_period(&mut model, &data[0], None, &cfg).unwrap();
        let last = log.epochs.last().unwrap().epoch;
        assert!(last - log.best_epoch <= cfg.patience);
        assert_eq!(validation_ap(model.params(), &data[0]).unwrap(), log.best_val_ap);
        let max = log.epochs.iter().map(|e| e.val_ap).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(max, log.best_val_ap);
    }

    #[test]
    fn batch_log_total_decomposes() {
        let g = tiny_graph(2);
        let cfg = TrainConfig { beta: 0.7, ..quick(Strategy::Ltf) };
        let out = run_strategy(&g, &small_sel(), &cfg, None).unwrap();
        let batches = &out.logs[1].batches;
        assert!(batches.iter().any(|b| b.l_dst != 0.0));
        for b in batches {
            assert!((b.l_tot - (b.loss_new + b.loss_sub + 0.7 * b.l_dst)).abs() < 1e-10);
        }
    }

    #[test]
    fn joint_af_is_zero() {
        let g = tiny_graph(3);
        let out = run_strategy(&g, &small_sel(), &quick(Strategy::Joint), None).unwrap();
        assert_eq!(out.record.periods[0].af, None);
        for p in &out.record.periods[1..] {
            assert_eq!(p.af, Some(0.0));
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { beta: -1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    }
}
