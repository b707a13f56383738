use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relprompt_bench::{planted_graph, random_view};
use relprompt_core::backbone::forward_logits;
use relprompt_core::encoder::mean_aggregate;
use relprompt_core::harness::{FraudModel, GraphContext, TrainConfig};

fn aggregation(c: &mut Criterion) {
    let (view, x) = random_view(2000, 12, 64, 1);
    c.bench_function("mean_aggregate n2000 d64", |b| {
        b.iter(|| mean_aggregate(&view, &x).unwrap())
    });
}

fn model_steps(c: &mut Criterion) {
    let graph = planted_graph(300);
    let ctx = GraphContext::new(&graph);
    let config = TrainConfig::default();
    let model = FraudModel::init(&config, &graph, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let len = model.prompt().map(|p| p.len()).unwrap_or(1);
    let input = Array2::from_elem((len, config.decoder.d_emb), 0.01);
    c.bench_function("lm forward prompt", |b| {
        b.iter(|| forward_logits(&model.lm, &input).unwrap())
    });

    let batch: Vec<usize> = (0..graph.node_count())
        .filter(|&v| graph.label(v).is_labeled())
        .take(8)
        .collect();
    c.bench_function("training step batch 8", |b| {
        b.iter(|| model.batch_objective(&graph, &ctx, &batch).unwrap())
    });
    c.bench_function("score 8 nodes", |b| {
        b.iter(|| model.score_nodes(&graph, &ctx, &batch).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = aggregation, model_steps
}
criterion_main!(benches);
