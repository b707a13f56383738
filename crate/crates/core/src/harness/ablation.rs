use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{Mode, TrainConfig};
use super::train::{evaluate, train};
use crate::error::{Error, Result};
use crate::objective::EvalReport;
use crate::relgraph::{stratified_split, RelationalGraph, SplitMasks};

/// Trains and tests every mode on the same splits and seed.
pub fn run_ablation(
    graph: &RelationalGraph,
    splits: &SplitMasks,
    base: &TrainConfig,
    modes: &[Mode],
) -> Result<BTreeMap<String, EvalReport>> {
    let mut out = BTreeMap::new();
    for &mode in modes {
        let ckpt = train(graph, splits, &base.with_mode(mode))?;
        out.insert(mode.to_string(), evaluate(&ckpt.model, graph, &splits.test)?);
    }
    Ok(out)
}

/// Prompt reduced to relation `j`'s token and description.
pub fn run_single_view(
    graph: &RelationalGraph,
    splits: &SplitMasks,
    config: &TrainConfig,
    j: usize,
) -> Result<EvalReport> {
    if j >= graph.relation_count() {
        return Err(Error::Config(format!(
            "view {j} out of range for {} relations",
            graph.relation_count()
        )));
    }
    let ckpt = train(graph, splits, &config.with_mode(Mode::SingleView(j)))?;
    evaluate(&ckpt.model, graph, &splits.test)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { mean, min, max }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSpread {
    pub auc: Spread,
    pub recall: Spread,
    pub g_mean: Spread,
}

impl MetricSpread {
    pub fn of(reports: &[&EvalReport]) -> Self {
        let pick = |f: fn(&EvalReport) -> f64| Spread::of(&reports.iter().map(|r| f(r)).collect::<Vec<_>>());
        Self {
            auc: pick(|r| r.auc),
            recall: pick(|r| r.recall),
            g_mean: pick(|r| r.g_mean),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: String,
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub split_seed: u64,
    pub runs: Vec<RunRecord>,
    /// Mean and range over seeds, per mode.
    pub summary: BTreeMap<String, MetricSpread>,
    /// Per seed, the arithmetic mean of the single-view metrics, summarized
    /// over seeds. Present when single-view modes were run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub single_view_average: Option<MetricSpread>,
}

/// Every mode for every seed of `base.seed_list()`, on one split.
pub fn sweep(graph: &RelationalGraph, base: &TrainConfig, modes: &[Mode]) -> Result<SweepReport> {
    if modes.is_empty() {
        return Err(Error::Empty("mode list"));
    }
    let split_seed = base.split_seed();
    let splits = stratified_split(graph, base.split, split_seed)?;
    let mut runs = Vec::new();
    for seed in base.seed_list() {
        let config = base.with_seed(seed);
        for &mode in modes {
            let ckpt = train(graph, &splits, &config.with_mode(mode))?;
            let report = evaluate(&ckpt.model, graph, &splits.test)?;
            runs.push(RunRecord {
                mode: mode.to_string(),
                seed,
                best_epoch: ckpt.best_epoch,
                report,
            });
        }
    }
    let mut summary = BTreeMap::new();
    for &mode in modes {
        let name = mode.to_string();
        let reports: Vec<&EvalReport> = runs.iter().filter(|r| r.mode == name).map(|r| &r.report).collect();
        summary.insert(name, MetricSpread::of(&reports));
    }
    let single_view_average = single_view_average(&runs);
    Ok(SweepReport {
        split_seed,
        runs,
        summary,
        single_view_average,
    })
}

fn single_view_average(runs: &[RunRecord]) -> Option<MetricSpread> {
    let mut per_seed: BTreeMap<u64, Vec<&EvalReport>> = BTreeMap::new();
    for r in runs {
        if matches!(r.mode.parse(), Ok(Mode::SingleView(_))) {
            per_seed.entry(r.seed).or_default().push(&r.report);
        }
    }
    if per_seed.is_empty() {
        return None;
    }
    let means: Vec<EvalReport> = per_seed
        .values()
        .map(|reports| {
            let n = reports.len() as f64;
            let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
            EvalReport {
                auc: avg(|r| r.auc),
                recall: avg(|r| r.recall),
                g_mean: avg(|r| r.g_mean),
                tp: 0,
                fp: 0,
                tn: 0,
                fn_: 0,
                n_eval: reports[0].n_eval,
            }
        })
        .collect();
    Some(MetricSpread::of(&means.iter().collect::<Vec<_>>()))
}
