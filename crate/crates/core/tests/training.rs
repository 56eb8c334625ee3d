use tgcl::backbone::{Model, Snapshot};
use tgcl::dataset::{self, PeriodData};
use tgcl::graph::{generate_synthetic, Split, SynthConfig, TemporalGraph};
use tgcl::selector::SelectionConfig;
use tgcl::trainer::{self, Ablation, SimRefresh, Strategy, TrainConfig};

fn drifting(periods: usize) -> TemporalGraph {
    generate_synthetic(&SynthConfig {
        num_periods: periods,
        classes_per_period: 2,
        nodes_per_class_per_period: 60,
        feature_dim: 6,
        drift_step: 1.5,
        seed: 21,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn train(strategy: Strategy) -> TrainConfig {
    TrainConfig {
        strategy,
        lr: 0.1,
        epochs: 30,
        batch_size: 64,
        patience: 30,
        hidden_dim: 16,
        ..TrainConfig::default()
    }
}

fn sel() -> SelectionConfig {
    SelectionConfig { m: 10, m_prime: 20, partition_size: 40, ..SelectionConfig::default() }
}

/// Mean cross-entropy of `snap` over every training node of `data`.
fn train_loss(snap: &Snapshot, data: &PeriodData) -> f64 {
    let ids = data.view.all_in(Split::Train);
    let inputs: Vec<(&[f64], usize)> = ids
        .iter()
        .map(|&id| (data.input(id).unwrap(), snap.params().class_index(data.label(id).unwrap()).unwrap()))
        .collect();
    snap.params().loss_and_grads(&inputs, None).unwrap().0.ce
}

#[test]
fn finetune_forgets_the_first_class_set() {
    let graph = drifting(3);
    let out = trainer::run_strategy(&graph, &sel(), &train(Strategy::Finetune), None).unwrap();
    let first = out.record.periods[0].precisions[0].unwrap();
    let last = out.record.periods[2].precisions[0].unwrap();
    assert!(last < first, "set 1 precision went from {first} to {last}");
}

#[test]
fn joint_fits_the_union_at_least_as_well_as_finetune() {
    let graph = drifting(2);
    let data = dataset::build_all(&graph, 0).unwrap();
    let joint = trainer::run_strategy_on(&data, graph.feature_dim(), &sel(), &train(Strategy::Joint), None).unwrap();
    let finetune =
        trainer::run_strategy_on(&data, graph.feature_dim(), &sel(), &train(Strategy::Finetune), None).unwrap();
    let j = train_loss(&joint.snapshots[1], &data[1]);
    let f = train_loss(&finetune.snapshots[1], &data[1]);
    assert!(j <= f, "joint {j} finetune {f}");
}

#[test]
fn replay_reduces_forgetting_against_finetune() {
    let graph = drifting(3);
    let joint = trainer::run_strategy(&graph, &sel(), &train(Strategy::Joint), None).unwrap();
    let finetune = trainer::run_strategy(&graph, &sel(), &train(Strategy::Finetune), Some(&joint.record)).unwrap();
    let er = trainer::run_strategy(&graph, &sel(), &train(Strategy::Er), Some(&joint.record)).unwrap();
    let af = |r: &trainer::RunOutput| r.record.final_period().unwrap().af.unwrap();
    assert!(af(&er) < af(&finetune), "er {} finetune {}", af(&er), af(&finetune));
}

#[test]
fn batch_losses_decompose_with_distribution_term() {
    let graph = drifting(2);
    let cfg = TrainConfig { beta: 0.7, epochs: 4, ..train(Strategy::Ltf) };
    let out = trainer::run_strategy(&graph, &sel(), &cfg, None).unwrap();
    let batches = &out.logs[1].batches;
    assert!(batches.iter().any(|b| b.l_dst != 0.0));
    for b in batches {
        assert!((b.l_tot - (b.loss_new + b.loss_sub + 0.7 * b.l_dst)).abs() <= 1e-10);
        assert!(b.l_dst <= 0.0);
    }
}

#[test]
fn ablations_without_distribution_term_log_none() {
    let graph = drifting(2);
    for ablation in [Ablation::ErrOnly, Ablation::DistOnly, Ablation::Both] {
        let cfg = TrainConfig { ablation, epochs: 3, ..train(Strategy::Ltf) };
        let out = trainer::run_strategy(&graph, &sel(), &cfg, None).unwrap();
        assert!(out.logs.iter().flat_map(|l| &l.batches).all(|b| b.l_dst == 0.0));
        assert_eq!(out.record.ablation, ablation.name());
    }
}

#[test]
fn per_step_refresh_trains_and_is_deterministic() {
    let graph = drifting(2);
    let cfg = TrainConfig { sim_refresh: SimRefresh::Step, epochs: 3, ..train(Strategy::Ltf) };
    let a = trainer::run_strategy(&graph, &sel(), &cfg, None).unwrap();
    let b = trainer::run_strategy(&graph, &sel(), &cfg, None).unwrap();
    assert_eq!(a.snapshots, b.snapshots);
    assert!(a.snapshots.last().unwrap().params().all_finite());
}

#[test]
fn early_stopping_halts_within_patience_of_the_best_epoch() {
    let graph = drifting(2);
    let cfg = TrainConfig { patience: 2, epochs: 50, ..train(Strategy::Finetune) };
    let out = trainer::run_strategy(&graph, &sel(), &cfg, None).unwrap();
    for log in &out.logs {
        assert!(log.epochs.len() <= log.best_epoch + 2);
        let best = log.epochs[log.best_epoch - 1].val_ap;
        assert_eq!(best, log.best_val_ap);
        assert!(log.epochs.iter().all(|e| e.val_ap <= best));
    }
}
