use std::collections::BTreeSet;

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use relprompt_core::backbone::{forward_logits, DecoderConfig, LanguageModel};
use relprompt_core::dataio::{build_temporal_edges, TransactionRow, TransactionTable};
use relprompt_core::encoder::mean_aggregate;
use relprompt_core::objective::roc_auc;
use relprompt_core::relgraph::{
    add_self_loops, partition_relations, stratified_split, Label, Relation, RelationalGraph, SubgraphView,
};

fn graph_strategy() -> impl Strategy<Value = RelationalGraph> {
    (2usize..30, 1usize..4).prop_flat_map(|(n, m)| {
        let labels = prop::collection::vec(0u8..3, n);
        let directed = prop::collection::vec(any::<bool>(), m);
        let edges = prop::collection::vec(prop::collection::vec((0..n, 0..n), 0..3 * n), m);
        (Just(n), labels, directed, edges).prop_map(|(n, labels, directed, edges)| {
            let relations = directed
                .iter()
                .enumerate()
                .map(|(id, &d)| Relation {
                    id,
                    name: format!("r{id}"),
                    description: String::new(),
                    directed: d,
                })
                .collect();
            let labels = labels
                .into_iter()
                .map(|c| match c {
                    0 => Label::Normal,
                    1 => Label::Fraud,
                    _ => Label::Unlabeled,
                })
                .collect();
            RelationalGraph::new(Array2::zeros((n, 1)), labels, relations, edges).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn views_cover_every_edge_once(g in graph_strategy()) {
        let views = partition_relations(&g);
        let mut seen = BTreeSet::new();
        for (j, v) in views.iter().enumerate() {
            prop_assert_eq!(v.edges(), g.edges(j));
            for &e in v.edges() {
                prop_assert!(seen.insert((j, e)));
                prop_assert!(e.0 != e.1);
            }
        }
        prop_assert_eq!(seen.len(), g.total_edges());
    }

    #[test]
    fn undirected_views_are_symmetric(g in graph_strategy()) {
        for v in partition_relations(&g).iter().filter(|v| !v.is_directed()) {
            for a in 0..g.node_count() {
                for &b in v.neighbors(a) {
                    prop_assert!(v.neighbors(b).contains(&a));
                }
            }
        }
    }

    #[test]
    fn self_loops_add_one_neighbor_each(g in graph_strategy()) {
        for v in partition_relations(&g) {
            let looped = add_self_loops(&v).unwrap();
            prop_assert!(looped.has_self_loops());
            prop_assert!(add_self_loops(&looped).is_err());
            for a in 0..g.node_count() {
                prop_assert!(looped.neighbors(a).contains(&a));
                prop_assert_eq!(looped.neighbors(a).len(), v.neighbors(a).len() + 1);
            }
        }
    }

    #[test]
    fn splits_partition_labeled_nodes(g in graph_strategy(), seed in any::<u64>()) {
        let Ok(s) = stratified_split(&g, Default::default(), seed) else {
            return Ok(());
        };
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        let labeled: Vec<usize> = (0..g.node_count()).filter(|&v| g.label(v).is_labeled()).collect();
        prop_assert_eq!(all, labeled);
        prop_assert_eq!(s, stratified_split(&g, Default::default(), seed).unwrap());
    }

    #[test]
    fn mean_of_constant_states_is_constant(
        n in 1usize..20,
        edges in prop::collection::vec((0usize..20, 0usize..20), 0..40),
        c in -5.0f64..5.0,
    ) {
        let edges: Vec<_> = edges.into_iter().filter(|&(a, b)| a < n && b < n && a != b).collect();
        let view = SubgraphView::from_edges(0, n, &edges, false).unwrap();
        let x = Array2::from_elem((n, 3), c);
        let out = mean_aggregate(&view, &x).unwrap();
        for v in 0..n {
            let want = if view.neighbors(v).is_empty() { 0.0 } else { c };
            for k in 0..3 {
                prop_assert!((out[[v, k]] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn temporal_edges_point_forward_with_bounded_fanout(
        rows in prop::collection::vec((0u32..6, 0u8..3), 1..40),
        k in 1usize..4,
    ) {
        let rows: Vec<TransactionRow> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (t, g))| TransactionRow { node_id: i, timestamp: f64::from(t), groups: vec![g.to_string()] })
            .collect();
        let table = TransactionTable::new(vec!["g".into()], rows.clone()).unwrap();
        let edges = build_temporal_edges(&table, "g", k).unwrap();
        let mut out_degree = vec![0; rows.len()];
        for &(s, d) in &edges {
            prop_assert_eq!(&rows[s].groups, &rows[d].groups);
            prop_assert!((rows[s].timestamp, s) < (rows[d].timestamp, d));
            out_degree[s] += 1;
        }
        prop_assert!(out_degree.iter().all(|&o| o <= k));
        let unique: BTreeSet<_> = edges.iter().collect();
        prop_assert_eq!(unique.len(), edges.len());
    }

    #[test]
    fn auc_is_bounded_and_antisymmetric(
        pairs in prop::collection::vec((-3i8..3, any::<bool>()), 2..50),
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| f64::from(p.0)).collect();
        let positive: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        match roc_auc(&scores, &positive) {
            None => prop_assert!(positive.iter().all(|&p| p) || positive.iter().all(|&p| !p)),
            Some(a) => {
                prop_assert!((0.0..=1.0).contains(&a));
                let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
                let b = roc_auc(&flipped, &positive).unwrap();
                prop_assert!((a + b - 1.0).abs() <= 1e-12);
                let swapped: Vec<bool> = positive.iter().map(|p| !p).collect();
                prop_assert!((roc_auc(&scores, &swapped).unwrap() - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn auc_depends_only_on_ranks(
        pairs in prop::collection::vec((-3i8..3, any::<bool>()), 2..50),
        shift in -10.0f64..10.0,
        scale in 0.1f64..10.0,
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| f64::from(p.0)).collect();
        let positive: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let moved: Vec<f64> = scores.iter().map(|s| s * scale + shift).collect();
        prop_assert_eq!(roc_auc(&scores, &positive), roc_auc(&moved, &positive));
    }

    #[test]
    fn next_token_distributions_normalize(seed in any::<u64>(), len in 1usize..8) {
        let cfg = DecoderConfig { layers: 1, heads: 2, d_emb: 8, ffn: 16, max_len: 8, init_std: 0.3, ..DecoderConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lm = LanguageModel::init(&cfg, 7, &mut rng).unwrap();
        let x = Array2::from_shape_fn((len, 8), |(i, j)| ((i * 8 + j) as f64 * 0.37 + seed as f64).sin());
        let logits = forward_logits(&lm, &x).unwrap();
        for row in logits.outer_iter() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let total: f64 = row.iter().map(|v| (v - max).exp() / z).sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
        }
    }
}
