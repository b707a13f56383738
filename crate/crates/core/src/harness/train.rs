use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngState};
use super::config::TrainConfig;
use super::model::{FraudModel, GraphContext, NodeScore};
use crate::error::{Error, Result};
use crate::objective::{compute_metrics, EvalReport};
use crate::optim::Adam;
use crate::relgraph::{RelationalGraph, SplitMasks};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
}

/// Scores `nodes` and aggregates the metrics.
pub fn evaluate_nodes(
    model: &FraudModel,
    graph: &RelationalGraph,
    ctx: &GraphContext,
    nodes: &[usize],
) -> Result<(EvalReport, Vec<NodeScore>)> {
    let scores = model.score_nodes(graph, ctx, nodes)?;
    let s: Vec<f64> = scores.iter().map(|n| n.score).collect();
    let p: Vec<_> = scores.iter().map(|n| n.prediction).collect();
    let g: Vec<_> = scores.iter().map(|n| n.label).collect();
    Ok((compute_metrics(&s, &p, &g)?, scores))
}

pub fn evaluate(model: &FraudModel, graph: &RelationalGraph, nodes: &[usize]) -> Result<EvalReport> {
    let ctx = GraphContext::new(graph);
    Ok(evaluate_nodes(model, graph, &ctx, nodes)?.0)
}

/// Joint training of the trainable set of `config.mode` with Adam on
/// shuffled mini-batches of training nodes. Returns the parameters of the
/// latest epoch with the best validation AUC (the initialization when no epoch
/// runs).
pub fn train(graph: &RelationalGraph, splits: &SplitMasks, config: &TrainConfig) -> Result<Checkpoint> {
    splits.validate(graph)?;
    config.validate_for(graph.relation_count())?;
    if splits.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let ctx = GraphContext::new(graph);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = FraudModel::init(config, graph, &mut rng)?;
    let trainable = model.trainable_names();
    let mut adam = Adam::new(config.adam);

    let mut best = model.clone();
    let mut best_auc = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut stale = 0;
    let mut history = Vec::new();
    let mut order = splits.train.clone();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (loss, grads) = model.batch_objective(graph, &ctx, batch)?;
            if !loss.is_finite() {
                return Err(Error::Config(format!("training loss became {loss} in epoch {epoch}")));
            }
            loss_sum += loss * batch.len() as f64;
            let params = model
                .named_mut()
                .into_iter()
                .filter(|(n, _)| trainable.contains(n))
                .collect();
            adam.update(params, &grads)?;
        }
        let train_loss = loss_sum / order.len() as f64;
        let (val, _) = evaluate_nodes(&model, graph, &ctx, &splits.val)?;
        log::info!(
            "{} seed {} epoch {epoch}: loss {train_loss:.5} val auc {:.4}",
            config.mode,
            config.seed,
            val.auc
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_auc: val.auc,
        });
        if val.auc >= best_auc {
            best_auc = val.auc;
            best = model.clone();
            best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
            if config.patience > 0 && stale >= config.patience {
                break;
            }
        }
    }
    Ok(Checkpoint {
        model: best,
        splits: splits.clone(),
        history,
        best_epoch,
        rng: RngState::capture(config.seed, &rng),
        dataset: None,
        feature_dim: graph.feature_dim(),
        relation_count: graph.relation_count(),
    })
}
