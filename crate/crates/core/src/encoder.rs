//! Parallel per-relation GraphSAGE encoders with full-batch mean
//! aggregation.
//!
//! Each relation owns its own stack of weight matrices `W⁽ˡ⁾` of shape
//! `out_l × 2·in_l`; a layer computes
//! `h_v ← ELU(W · [h_v ∥ mean_{u ∈ N(v)} h_u])`, starting from the raw
//! features. The last layer's width is the language model's embedding width,
//! so its output is injected as a soft token without a separate projection.

use std::sync::Arc;

use ndarray::{concatenate, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relgraph::{RelationalGraph, SubgraphView};
use crate::tape::{elu, Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Number of aggregation layers `K`.
    pub depth: usize,
    /// Output width of each layer; the last one equals `d_emb`.
    pub hidden_dims: Vec<usize>,
}

impl EncoderConfig {
    /// Two layers, both of width `d_emb`.
    pub fn with_width(d_emb: usize) -> Self {
        Self {
            depth: 2,
            hidden_dims: vec![d_emb; 2],
        }
    }

    pub fn output_dim(&self) -> usize {
        *self.hidden_dims.last().unwrap_or(&0)
    }

    pub fn validate(&self, d_emb: usize) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("encoder depth must be at least 1".into()));
        }
        if self.hidden_dims.len() != self.depth {
            return Err(Error::Config(format!(
                "encoder depth {} but {} hidden dims",
                self.depth,
                self.hidden_dims.len()
            )));
        }
        if self.output_dim() != d_emb {
            return Err(Error::Config(format!(
                "encoder output width {} must equal the embedding width {d_emb}",
                self.output_dim()
            )));
        }
        Ok(())
    }
}

/// Relation-specific weights, `weights[relation][layer]`. Nothing is shared
/// across relations.
#[derive(Clone, Debug, PartialEq)]
pub struct SageParams {
    pub weights: Vec<Vec<Array2<f64>>>,
}

impl SageParams {
    /// Glorot-uniform initialization, `±sqrt(6 / (fan_in + fan_out))`.
    pub fn init<R: Rng>(cfg: &EncoderConfig, feature_dim: usize, relations: usize, rng: &mut R) -> Self {
        let weights = (0..relations)
            .map(|_| {
                let mut fan_in = feature_dim;
                cfg.hidden_dims
                    .iter()
                    .map(|&out| {
                        let cols = 2 * fan_in;
                        let bound = (6.0 / (cols + out) as f64).sqrt();
                        let w = Array2::from_shape_fn((out, cols), |_| rng.random_range(-bound..bound));
                        fan_in = out;
                        w
                    })
                    .collect()
            })
            .collect();
        Self { weights }
    }

    pub fn relation_count(&self) -> usize {
        self.weights.len()
    }

    pub fn check_shapes(&self, cfg: &EncoderConfig, feature_dim: usize, relations: usize) -> Result<()> {
        if self.weights.len() != relations {
            return Err(Error::shape(
                "encoder",
                format!("{} relation branches for {relations} relations", self.weights.len()),
            ));
        }
        for (j, layers) in self.weights.iter().enumerate() {
            if layers.len() != cfg.depth {
                return Err(Error::shape(
                    "encoder",
                    format!("relation {j}: {} layers", layers.len()),
                ));
            }
            let mut fan_in = feature_dim;
            for (l, (w, &out)) in layers.iter().zip(&cfg.hidden_dims).enumerate() {
                if w.dim() != (out, 2 * fan_in) {
                    return Err(Error::shape(
                        "encoder",
                        format!(
                            "relation {j} layer {l}: {:?}, expected {:?}",
                            w.dim(),
                            (out, 2 * fan_in)
                        ),
                    ));
                }
                fan_in = out;
            }
        }
        Ok(())
    }

    pub fn param_name(relation: usize, layer: usize) -> String {
        format!("sage/{relation}/{layer}")
    }

    pub fn named(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        for (j, layers) in self.weights.iter().enumerate() {
            for (l, w) in layers.iter().enumerate() {
                out.push((Self::param_name(j, l), w));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = Vec::new();
        for (j, layers) in self.weights.iter_mut().enumerate() {
            for (l, w) in layers.iter_mut().enumerate() {
                out.push((Self::param_name(j, l), w));
            }
        }
        out
    }
}

/// Final-layer node states, `n × m × d_emb`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationEmbeddings {
    data: Array3<f64>,
}

impl RelationEmbeddings {
    pub fn from_relations(slices: &[Array2<f64>]) -> Result<Self> {
        let views: Vec<_> = slices.iter().map(|s| s.view().insert_axis(Axis(1))).collect();
        let data = concatenate(Axis(1), &views).map_err(|e| Error::shape("relation embeddings", e.to_string()))?;
        Ok(Self { data })
    }

    pub fn node_count(&self) -> usize {
        self.data.dim().0
    }

    pub fn relation_count(&self) -> usize {
        self.data.dim().1
    }

    pub fn dim(&self) -> usize {
        self.data.dim().2
    }

    /// The `m × d_emb` block `H_v` of one node.
    pub fn node(&self, v: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), v)
    }

    /// The `n × d_emb` slice of one relation.
    pub fn relation(&self, j: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(1), j)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn mean_kernel(neighbors: &[Vec<usize>], states: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((neighbors.len(), states.ncols()));
    for (v, nbrs) in neighbors.iter().enumerate() {
        if nbrs.is_empty() {
            continue;
        }
        let mut row = out.row_mut(v);
        for &u in nbrs {
            row += &states.row(u);
        }
        row /= nbrs.len() as f64;
    }
    out
}

/// Element-wise mean of each node's neighbor rows; zero for isolated nodes.
pub fn mean_aggregate(view: &SubgraphView, states: &Array2<f64>) -> Result<Array2<f64>> {
    if states.nrows() != view.node_count() {
        return Err(Error::shape(
            "mean_aggregate",
            format!("{} state rows for {} nodes", states.nrows(), view.node_count()),
        ));
    }
    Ok(mean_kernel(view.neighbor_lists(), states))
}

/// One GraphSAGE layer: `ELU(W · [self ∥ neighborhood mean])`.
pub fn sage_layer(view: &SubgraphView, states: &Array2<f64>, w: &Array2<f64>) -> Result<Array2<f64>> {
    if w.ncols() != 2 * states.ncols() {
        return Err(Error::shape(
            "sage_layer",
            format!("weight {:?} for input width {}", w.dim(), states.ncols()),
        ));
    }
    let neigh = mean_aggregate(view, states)?;
    let joined =
        concatenate(Axis(1), &[states.view(), neigh.view()]).map_err(|e| Error::shape("sage_layer", e.to_string()))?;
    Ok(joined.dot(&w.t()).mapv(elu))
}

/// Runs every relation's encoder from the raw features and stacks the
/// results.
pub fn encode_all(
    graph: &RelationalGraph,
    views: &[SubgraphView],
    params: &SageParams,
    cfg: &EncoderConfig,
) -> Result<RelationEmbeddings> {
    params.check_shapes(cfg, graph.feature_dim(), graph.relation_count())?;
    if views.len() != graph.relation_count() {
        return Err(Error::shape(
            "encode_all",
            format!("{} views for {} relations", views.len(), graph.relation_count()),
        ));
    }
    let slices = views
        .iter()
        .zip(&params.weights)
        .map(|(view, layers)| {
            layers
                .iter()
                .try_fold(graph.features().clone(), |h, w| sage_layer(view, &h, w))
        })
        .collect::<Result<Vec<_>>>()?;
    RelationEmbeddings::from_relations(&slices)
}

/// Tape version of one relation branch; returns the `n × d_emb` output.
pub fn encode_relation_on_tape(tape: &mut Tape, view: &Arc<SubgraphView>, features: Var, weights: &[Var]) -> Var {
    weights.iter().fold(features, |h, &w| {
        let neigh = tape.mean_aggregate(h, view);
        let joined = tape.concat_cols(&[h, neigh]);
        let pre = tape.matmul_t(joined, w);
        tape.elu(pre)
    })
}
