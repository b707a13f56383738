//! Fixtures shared by the benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relprompt_core::dataio::{synth_fraud_graph, SynthSpec};
use relprompt_core::relgraph::{RelationalGraph, SubgraphView};

/// The planted three-relation graph used by the end-to-end tests.
pub fn planted_graph(node_count: usize) -> RelationalGraph {
    let spec = SynthSpec {
        node_count,
        feature_dim: 16,
        fraud_rate: 0.1,
        signal: vec![0.9, 0.5, 0.0],
        avg_degree: 12.0,
        noise_prob: 0.01,
        seed: 0,
    };
    synth_fraud_graph(&spec).expect("valid spec").0
}

/// A random undirected view with about `degree` neighbors per node and a
/// matching state matrix.
pub fn random_view(n: usize, degree: usize, d: usize, seed: u64) -> (SubgraphView, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges: Vec<(usize, usize)> = (0..n * degree / 2)
        .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
        .filter(|(s, t)| s != t)
        .collect();
    let view = SubgraphView::from_edges(0, n, &edges, false).expect("valid edges");
    let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    (view, x)
}
