use proptest::prelude::*;

use tgcl::graph::{ClassId, NodeId};
use tgcl::kernels::{self, KernelParams};
use tgcl::metrics;
use tgcl::selector::{self, Candidate, KernelMatrix, Partitioner, ScoringMode, SelectionConfig};

fn point(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, dim)
}

fn two_sets() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>, f64)> {
    (1usize..6).prop_flat_map(|dim| {
        (prop::collection::vec(point(dim), 1..12), prop::collection::vec(point(dim), 1..12), 0.05..3.0f64)
    })
}

fn candidates() -> impl Strategy<Value = Vec<Candidate>> {
    (2usize..5).prop_flat_map(|dim| {
        prop::collection::vec((point(dim), 0.0..2.0f64, 0u32..3), 2..30).prop_map(|rows| {
            rows.into_iter()
                .enumerate()
                .map(|(i, (embedding, j_cls, label))| Candidate {
                    id: NodeId(i as u32),
                    label: ClassId(label),
                    embedding,
                    j_cls,
                })
                .collect()
        })
    })
}

proptest! {
    #[test]
    fn kernel_is_bounded_and_symmetric(x in point(4), y in point(4), gamma in 0.01..5.0f64, squared in any::<bool>()) {
        let p = KernelParams::with_distance(gamma, squared).unwrap();
        let k = p.eval(&x, &y);
        prop_assert!(k > 0.0 || k == 0.0);
        prop_assert!(k <= 1.0);
        prop_assert_eq!(k, p.eval(&y, &x));
        prop_assert_eq!(p.eval(&x, &x), 1.0);
    }

    #[test]
    fn mmd_is_nonnegative_and_symmetric((a, b, gamma) in two_sets()) {
        let p = KernelParams::new(gamma).unwrap();
        let ab = kernels::mmd_sq(&a, &b, &p).unwrap();
        let ba = kernels::mmd_sq(&b, &a, &p).unwrap();
        prop_assert!(ab >= -1e-12, "mmd {}", ab);
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!(kernels::mmd_sq(&a, &a, &p).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn mmd_ignores_set_order((a, b, gamma) in two_sets()) {
        let p = KernelParams::new(gamma).unwrap();
        let mut rev = a.clone();
        rev.reverse();
        let x = kernels::mmd_sq(&a, &b, &p).unwrap();
        let y = kernels::mmd_sq(&rev, &b, &p).unwrap();
        prop_assert!((x - y).abs() <= 1e-12);
    }

    #[test]
    fn quotas_are_exact_and_capped(sizes in prop::collection::vec(0usize..40, 1..10), total in 0usize..200) {
        let q = selector::allocate_quotas(&sizes, total);
        prop_assert_eq!(q.len(), sizes.len());
        prop_assert_eq!(q.iter().sum::<usize>(), total.min(sizes.iter().sum()));
        for (qi, si) in q.iter().zip(&sizes) {
            prop_assert!(qi <= si);
        }
    }

    #[test]
    fn greedy_picks_distinct_nodes_up_to_budget(cands in candidates(), budget in 1usize..12, exact in any::<bool>()) {
        let refs: Vec<&Candidate> = cands.iter().collect();
        let p = KernelParams::new(0.5).unwrap();
        let km = KernelMatrix::new(&refs, &p);
        let mode = if exact { ScoringMode::ExactMarginal } else { ScoringMode::Witness };
        let picks = selector::greedy(&refs, &km, budget, 1.0, true, mode).unwrap();
        prop_assert_eq!(picks.len(), budget.min(cands.len()));
        let mut sorted = picks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), picks.len());
    }

    #[test]
    fn partitions_cover_every_candidate_once(
        cands in candidates(),
        p in 1usize..12,
        kind in prop_oneof![Just(Partitioner::Random), Just(Partitioner::Kmeans), Just(Partitioner::Hierarchical)],
        seed in any::<u64>(),
    ) {
        let cfg = SelectionConfig { partition_size: p, partitioner: kind, seed, ..Default::default() };
        let parts = selector::partition(&cands, &cfg, &[2]).unwrap();
        prop_assert_eq!(parts.len(), cands.len().div_ceil(p));
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..cands.len()).collect::<Vec<_>>());
        for part in &parts {
            prop_assert!(!part.is_empty() && part.len() <= p);
        }
        prop_assert_eq!(parts, selector::partition(&cands, &cfg, &[2]).unwrap());
    }

    #[test]
    fn precision_is_a_fraction(pairs in prop::collection::vec((0u32..4, 0u32..4), 1..50)) {
        let pairs: Vec<(ClassId, ClassId)> = pairs.into_iter().map(|(a, b)| (ClassId(a), ClassId(b))).collect();
        let p = metrics::precision(&pairs).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn ap_ignores_set_order(mut ps in prop::collection::vec(prop::option::of(0.0..=1.0f64), 1..8)) {
        prop_assume!(ps.iter().any(Option::is_some));
        let n = ps.len();
        let forward = metrics::ap(n, &ps).unwrap();
        ps.reverse();
        let backward = metrics::ap(n, &ps).unwrap();
        prop_assert!((forward - backward).abs() <= 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&forward));
    }

    #[test]
    fn af_against_itself_is_zero(ps in prop::collection::vec(prop::option::of(0.0..=1.0f64), 2..8)) {
        prop_assume!(ps[..ps.len() - 1].iter().any(Option::is_some));
        prop_assert_eq!(metrics::af(ps.len(), &ps, &ps).unwrap(), 0.0);
    }

    #[test]
    fn af_is_bounded(pairs in prop::collection::vec((0.0..=1.0f64, 0.0..=1.0f64), 2..8)) {
        let (method, joint): (Vec<_>, Vec<_>) = pairs.into_iter().map(|(a, b)| (Some(a), Some(b))).unzip();
        let af = metrics::af(method.len(), &method, &joint).unwrap();
        prop_assert!((-1.0..=1.0).contains(&af));
    }
}
