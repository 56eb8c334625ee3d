use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tgcl::backbone::{Backbone, Snapshot};
use tgcl::dataset::{self, PeriodData};
use tgcl::graph::{generate_synthetic, ClassId, NodeId, Split, SynthConfig};
use tgcl::kernels::{self, KernelParams};
use tgcl::selector::{self, BaselineKind, Candidate, ReplayBuffer, SelectionConfig, SelectionScope};

fn period_two() -> (PeriodData, Snapshot) {
    let graph = generate_synthetic(&SynthConfig {
        num_periods: 2,
        classes_per_period: 2,
        nodes_per_class_per_period: 40,
        feature_dim: 4,
        seed: 11,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut data = dataset::build_all(&graph, 0).unwrap();
    let mut model = Backbone::new(4, 8, 1);
    model.grow_head(&data[1].view.old_classes).unwrap();
    (data.remove(1), model.snapshot())
}

fn sel(m: usize, m_prime: usize) -> SelectionConfig {
    SelectionConfig { m, m_prime, partition_size: 25, ..SelectionConfig::default() }
}

#[test]
fn budgets_are_exact() {
    let (data, prev) = period_two();
    let old = data.view.old_in(Split::Train).len();
    for (m, mp) in [(1, 1), (5, 9), (12, 3)] {
        let (buffer, _) = selector::select(&data, &prev, &sel(m, mp)).unwrap();
        assert_eq!(buffer.sub.len(), m.min(old));
        assert_eq!(buffer.sim.len(), mp.min(old));
    }
}

#[test]
fn budget_above_old_data_takes_everything() {
    let (data, prev) = period_two();
    let old: HashSet<NodeId> = data.view.old_in(Split::Train).into_iter().collect();
    let cfg = SelectionConfig { partition_size: old.len() + 1, ..sel(old.len(), old.len()) };
    let (buffer, _) = selector::select(&data, &prev, &cfg).unwrap();
    assert_eq!(buffer.sub.iter().map(|e| e.id).collect::<HashSet<_>>(), old);
    assert_eq!(buffer.sim.iter().copied().collect::<HashSet<_>>(), old);

    let baseline = selector::baseline_select(BaselineKind::Random, &data, &prev, old.len() + 5, 0).unwrap();
    assert_eq!(baseline.sub.len(), old.len());
}

#[test]
fn selection_is_deterministic_and_uses_only_old_train_nodes() {
    let (data, prev) = period_two();
    let old: HashSet<NodeId> = data.view.old_in(Split::Train).into_iter().collect();
    for scope in [SelectionScope::Global, SelectionScope::PerClass] {
        let cfg = SelectionConfig { scope, ..sel(8, 10) };
        let (a, _) = selector::select(&data, &prev, &cfg).unwrap();
        let (b, _) = selector::select(&data, &prev, &SelectionConfig { parallel: true, ..cfg.clone() }).unwrap();
        assert_eq!((&a.sub, &a.sim, a.kernel), (&b.sub, &b.sim, b.kernel));
        assert!(a.sub.iter().all(|e| old.contains(&e.id)));
        assert!(a.sim.iter().all(|id| old.contains(id)));
        let ids: HashSet<NodeId> = a.sub.iter().map(|e| e.id).collect();
        assert_eq!(ids.len(), a.sub.len());
    }
}

#[test]
fn per_class_scope_balances_the_buffer() {
    let (data, prev) = period_two();
    let (buffer, _) = selector::select(&data, &prev, &sel(10, 10)).unwrap();
    let mut per_class: BTreeMap<ClassId, usize> = BTreeMap::new();
    for e in &buffer.sub {
        *per_class.entry(e.label).or_default() += 1;
    }
    assert_eq!(per_class.len(), 2);
    assert!(per_class.values().all(|&c| c == 5));
}

#[test]
fn buffer_json_round_trip() {
    let (data, prev) = period_two();
    let (buffer, report) = selector::select(&data, &prev, &sel(6, 6)).unwrap();
    let text = buffer.to_json().unwrap();
    assert_eq!(ReplayBuffer::from_json(&text).unwrap(), buffer);
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in ["period", "sub", "sim", "config"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    assert!(report.gamma > 0.0);
    assert_eq!(report.parts.iter().map(|p| p.sub_quota).sum::<usize>(), 6);
}

#[test]
fn stored_errors_match_the_previous_model() {
    let (data, prev) = period_two();
    let cfg = sel(6, 6);
    let (buffer, _) = selector::select(&data, &prev, &cfg).unwrap();
    for e in &buffer.sub {
        let expected = selector::j_cls(data.input(e.id).unwrap(), e.label, &prev, cfg.error_loss).unwrap();
        assert_eq!(e.j_cls, expected);
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[test]
fn herding_first_pick_is_exhaustive_argmin() {
    for toy in 0..20u64 {
        let mut r = ChaCha8Rng::seed_from_u64(toy);
        let cands: Vec<Candidate> = (0..20)
            .map(|i| Candidate {
                id: NodeId(i),
                label: ClassId(0),
                embedding: (0..3).map(|_| r.random_range(-2.0..2.0)).collect(),
                j_cls: 0.0,
            })
            .collect();
        let refs: Vec<&Candidate> = cands.iter().collect();
        let mean: Vec<f64> = (0..3).map(|d| cands.iter().map(|c| c.embedding[d]).sum::<f64>() / 20.0).collect();
        let mut best = 0;
        for i in 1..20 {
            if sq_dist(&cands[i].embedding, &mean) < sq_dist(&cands[best].embedding, &mean) {
                best = i;
            }
        }
        assert_eq!(selector::herding(&refs, 4)[0], best, "toy {toy}");
    }
}

#[test]
fn herding_baseline_is_class_balanced() {
    let (data, prev) = period_two();
    let buffer = selector::baseline_select(BaselineKind::Herding, &data, &prev, 7, 0).unwrap();
    let mut per_class: BTreeMap<ClassId, usize> = BTreeMap::new();
    for e in &buffer.sub {
        *per_class.entry(e.label).or_default() += 1;
    }
    assert_eq!(per_class.values().copied().collect::<Vec<_>>(), vec![4, 3]);
    assert!(buffer.sim.is_empty());
}

#[test]
fn marginal_gains_diminish_under_the_kernel_bound() {
    // Well separated points with a steep kernel keep every off-diagonal
    // kernel value under the bound for n = 5.
    for toy in 0..10u64 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + toy);
        let cands: Vec<Candidate> = (0..5)
            .map(|i| Candidate {
                id: NodeId(i),
                label: ClassId(0),
                embedding: vec![10.0 * i as f64 + r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
                j_cls: 0.0,
            })
            .collect();
        let refs: Vec<&Candidate> = cands.iter().collect();
        let k = KernelParams::new(2.0).unwrap();
        let emb: Vec<&[f64]> = cands.iter().map(|c| c.embedding.as_slice()).collect();
        assert!(kernels::kernel_bound_check(&emb, &k, 5).unwrap().satisfied);

        let cfg = SelectionConfig { alpha: 0.0, ..SelectionConfig::default() };
        let picks = selector::greedy_select_sub(&refs, 5, &k, &cfg).unwrap();
        let values: Vec<f64> =
            (1..=5).map(|t| selector::selection_objective(&refs, &picks[..t], 0.0, &k).unwrap()).collect();
        let gains: Vec<f64> = values.windows(2).map(|w| w[0] - w[1]).collect();
        for g in gains.windows(2) {
            assert!(g[1] <= g[0] + 1e-12, "toy {toy}: gains {gains:?}");
        }
    }
}
