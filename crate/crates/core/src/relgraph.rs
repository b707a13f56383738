//! Multi-relational graph data model, per-relation views and labeled splits.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Node label. Serialized as `0`, `1` and `-1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Normal,
    Fraud,
    Unlabeled,
}

impl Label {
    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            0 => Some(Label::Normal),
            1 => Some(Label::Fraud),
            -1 => Some(Label::Unlabeled),
            _ => None,
        }
    }

    pub fn code(self) -> i64 {
        match self {
            Label::Normal => 0,
            Label::Fraud => 1,
            Label::Unlabeled => -1,
        }
    }

    pub fn is_labeled(self) -> bool {
        self != Label::Unlabeled
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i64(self.code())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let code = i64::deserialize(d)?;
        Label::from_code(code).ok_or_else(|| serde::de::Error::custom(format!("bad label {code}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub id: usize,
    pub name: String,
    pub description: String,
    pub directed: bool,
}

/// One node set, a dense feature matrix and several typed edge sets.
///
/// Edges are stored per relation, so an edge is identified by its
/// `(relation, src, dst)` triple and relation edge sets are disjoint by
/// construction. Undirected edges are canonicalized to `src < dst`;
/// duplicates and self-pairs are dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationalGraph {
    features: Array2<f64>,
    labels: Vec<Label>,
    relations: Vec<Relation>,
    edges: Vec<Vec<(usize, usize)>>,
}

impl RelationalGraph {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<Label>,
        relations: Vec<Relation>,
        edges: Vec<Vec<(usize, usize)>>,
    ) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n {
            return Err(Error::Graph(format!("{} feature rows but {} labels", n, labels.len())));
        }
        if relations.is_empty() {
            return Err(Error::Graph("at least one relation is required".into()));
        }
        if relations.len() != edges.len() {
            return Err(Error::Graph(format!(
                "{} relations but {} edge lists",
                relations.len(),
                edges.len()
            )));
        }
        for (i, r) in relations.iter().enumerate() {
            if r.id != i {
                return Err(Error::Graph(format!(
                    "relation `{}` has id {} at position {i}; ids must be dense 0..m-1",
                    r.name, r.id
                )));
            }
        }
        let mut names = BTreeSet::new();
        for r in &relations {
            if !names.insert(r.name.as_str()) {
                return Err(Error::Graph(format!("duplicate relation name `{}`", r.name)));
            }
        }
        let mut canonical = Vec::with_capacity(edges.len());
        for (rel, list) in relations.iter().zip(edges) {
            let mut set = BTreeSet::new();
            for (src, dst) in list {
                if src >= n || dst >= n {
                    return Err(Error::EdgeOutOfRange {
                        relation: rel.name.clone(),
                        src,
                        dst,
                        node_count: n,
                    });
                }
                if src == dst {
                    continue;
                }
                if rel.directed {
                    set.insert((src, dst));
                } else {
                    set.insert((src.min(dst), src.max(dst)));
                }
            }
            canonical.push(set.into_iter().collect());
        }
        Ok(Self {
            features,
            labels,
            relations,
            edges: canonical,
        })
    }

    pub fn node_count(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn label(&self, node: usize) -> Label {
        self.labels[node]
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn edges(&self, relation: usize) -> &[(usize, usize)] {
        &self.edges[relation]
    }

    pub fn total_edges(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    /// Indices of labeled nodes, ascending.
    pub fn labeled_nodes(&self) -> Vec<usize> {
        (0..self.node_count())
            .filter(|&v| self.labels[v].is_labeled())
            .collect()
    }
}

/// The homogeneous subgraph of one relation, as per-node neighbor lists.
///
/// Neighbor lists are sorted ascending; aggregation sums in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct SubgraphView {
    relation_id: usize,
    directed: bool,
    neighbors: Vec<Vec<usize>>,
    edges: Vec<(usize, usize)>,
    self_loops: bool,
}

impl SubgraphView {
    /// Builds a view from an edge list. Undirected edges are expanded to
    /// both endpoints; directed edges `src → dst` make `src` an in-neighbor
    /// of `dst`.
    pub fn from_edges(relation_id: usize, node_count: usize, edges: &[(usize, usize)], directed: bool) -> Result<Self> {
        let mut neighbors = vec![Vec::new(); node_count];
        for &(src, dst) in edges {
            if src >= node_count || dst >= node_count {
                return Err(Error::EdgeOutOfRange {
                    relation: relation_id.to_string(),
                    src,
                    dst,
                    node_count,
                });
            }
            neighbors[dst].push(src);
            if !directed && src != dst {
                neighbors[src].push(dst);
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Self {
            relation_id,
            directed,
            neighbors,
            edges: edges.to_vec(),
            self_loops: false,
        })
    }

    pub fn relation_id(&self) -> usize {
        self.relation_id
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn neighbor_lists(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    /// The relation's edge list this view was built from.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn has_self_loops(&self) -> bool {
        self.self_loops
    }
}

/// Splits the graph into one view per relation, in relation order.
pub fn partition_relations(graph: &RelationalGraph) -> Vec<SubgraphView> {
    graph
        .relations()
        .iter()
        .map(|r| {
            SubgraphView::from_edges(r.id, graph.node_count(), graph.edges(r.id), r.directed)
                .expect("graph edges are validated at construction")
        })
        .collect()
}

/// Adds one self entry to every neighbor list.
pub fn add_self_loops(view: &SubgraphView) -> Result<SubgraphView> {
    if view.self_loops {
        return Err(Error::SelfLoopsPresent(view.relation_id));
    }
    let mut out = view.clone();
    for (v, list) in out.neighbors.iter_mut().enumerate() {
        let at = list.partition_point(|&u| u < v);
        if list.get(at) != Some(&v) {
            list.insert(at, v);
        }
    }
    out.self_loops = true;
    Ok(out)
}

/// Views as consumed by the encoder: directed (temporal) relations get
/// self-loops, undirected ones keep the node's own state through the
/// self/neighborhood concatenation instead.
pub fn encoder_views(graph: &RelationalGraph) -> Vec<SubgraphView> {
    partition_relations(graph)
        .into_iter()
        .map(|v| {
            if v.is_directed() {
                add_self_loops(&v).expect("fresh view has no self-loops")
            } else {
                v
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.4,
            val: 0.2,
            test: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMasks {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" | "valid" | "validation" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Split(format!("unknown split `{other}`"))),
        }
    }
}

impl SplitMasks {
    pub fn get(&self, which: SplitName) -> &[usize] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    /// Checks disjointness, labeled-only membership and coverage of the
    /// labeled node set.
    pub fn validate(&self, graph: &RelationalGraph) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &v in self.train.iter().chain(&self.val).chain(&self.test) {
            if v >= graph.node_count() {
                return Err(Error::Split(format!("node {v} out of range")));
            }
            if !graph.label(v).is_labeled() {
                return Err(Error::Split(format!("node {v} is unlabeled")));
            }
            if !seen.insert(v) {
                return Err(Error::Split(format!("node {v} appears in two splits")));
            }
        }
        let labeled: BTreeSet<usize> = graph.labeled_nodes().into_iter().collect();
        if seen != labeled {
            return Err(Error::Split("splits do not cover the labeled node set".into()));
        }
        Ok(())
    }
}

/// Per-class shuffled split of the labeled nodes.
///
/// Each class contributes `round(ratio · n_class)` nodes to train and val
/// (at least one each) and the remainder to test, so every split holds its
/// ratio share of each class within one node.
pub fn stratified_split(graph: &RelationalGraph, ratios: SplitRatios, seed: u64) -> Result<SplitMasks> {
    let sum = ratios.train + ratios.val + ratios.test;
    if [ratios.train, ratios.val, ratios.test].iter().any(|r| *r <= 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!(
            "ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = SplitMasks {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for class in [Label::Normal, Label::Fraud] {
        let mut nodes: Vec<usize> = (0..graph.node_count()).filter(|&v| graph.label(v) == class).collect();
        if nodes.len() < 3 {
            return Err(Error::Split(format!(
                "class {class:?} has {} labeled nodes, need at least 3",
                nodes.len()
            )));
        }
        nodes.shuffle(&mut rng);
        let n = nodes.len();
        let n_train = ((ratios.train * n as f64).round() as usize).clamp(1, n - 2);
        let n_val = ((ratios.val * n as f64).round() as usize).clamp(1, n - n_train - 1);
        masks.train.extend_from_slice(&nodes[..n_train]);
        masks.val.extend_from_slice(&nodes[n_train..n_train + n_val]);
        masks.test.extend_from_slice(&nodes[n_train + n_val..]);
    }
    masks.train.sort_unstable();
    masks.val.sort_unstable();
    masks.test.sort_unstable();
    Ok(masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn relation(id: usize, directed: bool) -> Relation {
        Relation {
            id,
            name: format!("r{id}"),
            description: format!("relation {id}"),
            directed,
        }
    }

    fn graph_with(labels: Vec<Label>, edges: Vec<Vec<(usize, usize)>>, directed: bool) -> RelationalGraph {
        let n = labels.len();
        let rels = (0..edges.len()).map(|i| relation(i, directed)).collect();
        RelationalGraph::new(Array2::zeros((n, 2)), labels, rels, edges).unwrap()
    }

    #[test]
    fn rejects_out_of_range_edges() {
        let err = RelationalGraph::new(
            Array2::zeros((3, 1)),
            vec![Label::Normal; 3],
            vec![relation(0, false)],
            vec![vec![(0, 3)]],
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::EdgeOutOfRange {
                dst: 3,
                node_count: 3,
                ..
            }
        ));
    }

    #[test]
    fn undirected_edges_are_symmetrized_and_deduplicated() {
        let g = graph_with(
            vec![Label::Normal; 4],
            vec![vec![(1, 0), (0, 1), (2, 3), (2, 2)]],
            false,
        );
        assert_eq!(g.edges(0), &[(0, 1), (2, 3)]);
        let views = partition_relations(&g);
        assert_eq!(views[0].neighbors(0), &[1]);
        assert_eq!(views[0].neighbors(1), &[0]);
        assert_eq!(views[0].neighbors(3), &[2]);
    }

    #[test]
    fn directed_views_hold_in_neighbors() {
        let g = graph_with(vec![Label::Normal; 3], vec![vec![(0, 1), (0, 2), (1, 2)]], true);
        let v = &partition_relations(&g)[0];
        assert!(v.neighbors(0).is_empty());
        assert_eq!(v.neighbors(1), &[0]);
        assert_eq!(v.neighbors(2), &[0, 1]);
    }

    #[test]
    fn single_relation_view_keeps_edges() {
        let edges = vec![(0, 1), (1, 2)];
        let g = graph_with(vec![Label::Normal; 3], vec![edges.clone()], false);
        assert_eq!(partition_relations(&g)[0].edges(), edges.as_slice());
    }

    #[test]
    fn self_loops_are_added_once() {
        let g = graph_with(vec![Label::Normal; 4], vec![vec![(0, 2), (0, 3)]], false);
        let v = &partition_relations(&g)[0];
        let looped = add_self_loops(v).unwrap();
        assert_eq!(looped.neighbors(0), &[0, 2, 3]);
        assert_eq!(looped.neighbors(1), &[1]);
        assert!(matches!(add_self_loops(&looped), Err(Error::SelfLoopsPresent(0))));
    }

    #[test]
    fn self_loops_grow_every_list_by_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let n = rng.random_range(1..30);
            let edges: Vec<_> = (0..rng.random_range(0..60))
                .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
                .collect();
            let directed = rng.random_bool(0.5);
            let g = graph_with(vec![Label::Normal; n], vec![edges], directed);
            let v = &partition_relations(&g)[0];
            let looped = add_self_loops(v).unwrap();
            for u in 0..n {
                assert_eq!(looped.neighbors(u).len(), v.neighbors(u).len() + 1);
                assert_eq!(looped.neighbors(u).iter().filter(|&&x| x == u).count(), 1);
            }
        }
    }

    #[test]
    fn encoder_views_loop_directed_relations_only() {
        let rels = vec![relation(0, false), relation(1, true)];
        let g = RelationalGraph::new(
            Array2::zeros((2, 1)),
            vec![Label::Normal; 2],
            rels,
            vec![vec![(0, 1)], vec![(0, 1)]],
        )
        .unwrap();
        let views = encoder_views(&g);
        assert!(!views[0].has_self_loops());
        assert!(views[1].has_self_loops());
        assert_eq!(views[1].neighbors(1), &[0, 1]);
    }

    #[test]
    fn ten_node_split_sizes() {
        let labels = (0..10)
            .map(|i| if i % 2 == 0 { Label::Fraud } else { Label::Normal })
            .collect();
        let g = graph_with(labels, vec![vec![]], false);
        let s = stratified_split(&g, SplitRatios::default(), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (4, 2, 4));
        for split in [&s.train, &s.val, &s.test] {
            let fraud = split.iter().filter(|&&v| g.label(v) == Label::Fraud).count();
            assert!((1..=3).contains(&fraud));
        }
        s.validate(&g).unwrap();
    }

    #[test]
    fn split_is_deterministic_and_skips_unlabeled() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let labels: Vec<Label> = (0..100)
            .map(|_| match rng.random_range(0..3) {
                0 => Label::Fraud,
                1 => Label::Normal,
                _ => Label::Unlabeled,
            })
            .collect();
        let g = graph_with(labels, vec![vec![]], false);
        let a = stratified_split(&g, SplitRatios::default(), 11).unwrap();
        let b = stratified_split(&g, SplitRatios::default(), 11).unwrap();
        assert_eq!(a, b);
        a.validate(&g).unwrap();
        let c = stratified_split(&g, SplitRatios::default(), 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_fails_for_tiny_class() {
        let labels = vec![Label::Fraud, Label::Fraud, Label::Normal, Label::Normal, Label::Normal];
        let g = graph_with(labels, vec![vec![]], false);
        assert!(matches!(
            stratified_split(&g, SplitRatios::default(), 0),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn stratification_within_one_node_by_enumeration() {
        let ratios = SplitRatios::default();
        for n_fraud in 3..60 {
            for n_normal in [3, 7, 50, 333] {
                let mut labels = vec![Label::Fraud; n_fraud];
                labels.extend(vec![Label::Normal; n_normal]);
                let g = graph_with(labels, vec![vec![]], false);
                let s = stratified_split(&g, ratios, 5).unwrap();
                for (split, r) in [(&s.train, ratios.train), (&s.val, ratios.val), (&s.test, ratios.test)] {
                    for (class, total) in [(Label::Fraud, n_fraud), (Label::Normal, n_normal)] {
                        let count = split.iter().filter(|&&v| g.label(v) == class).count();
                        assert!(
                            (count as f64 - r * total as f64).abs() <= 1.0,
                            "{class:?}: {count} vs {}",
                            r * total as f64
                        );
                    }
                }
            }
        }
    }
}
