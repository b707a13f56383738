use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{Mode, TrainConfig};
use crate::backbone::{embed, LanguageModel, Vocabulary};
use crate::encoder::{encode_all, encode_relation_on_tape, EncoderConfig, RelationEmbeddings, SageParams};
use crate::error::{Error, Result};
use crate::objective::{
    answer_logprobs, label_from_score, score_from_logprobs, sequence_logprob_on_tape, TargetSequences,
};
use crate::prompt::{assemble_template, flatten_features, AssembledPrompt, PromptTemplate};
use crate::relgraph::{encoder_views, partition_relations, Label, RelationalGraph, SubgraphView};
use crate::tape::{Tape, Var};

/// Views prepared once per graph: the encoder views (self-loops on directed
/// relations) and the plain relation partition used by flattened prompts.
pub struct GraphContext {
    pub encoder_views: Vec<SubgraphView>,
    shared: Vec<Arc<SubgraphView>>,
    pub plain_views: Vec<SubgraphView>,
}

impl GraphContext {
    pub fn new(graph: &RelationalGraph) -> Self {
        let encoder_views = encoder_views(graph);
        let shared = encoder_views.iter().cloned().map(Arc::new).collect();
        Self {
            encoder_views,
            shared,
            plain_views: partition_relations(graph),
        }
    }
}

/// Two-layer classifier over the concatenated relation embeddings; output
/// column 0 is normal, 1 is fraud.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpHead {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl MlpHead {
    pub fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
        };
        Self {
            w1: uniform(hidden, input),
            b1: Array2::zeros((1, hidden)),
            w2: uniform(2, hidden),
            b2: Array2::zeros((1, 2)),
        }
    }

    fn named(&self) -> Vec<(String, &Array2<f64>)> {
        vec![
            ("mlp/w1".into(), &self.w1),
            ("mlp/b1".into(), &self.b1),
            ("mlp/w2".into(), &self.w2),
            ("mlp/b2".into(), &self.b2),
        ]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        vec![
            ("mlp/w1".into(), &mut self.w1),
            ("mlp/b1".into(), &mut self.b1),
            ("mlp/w2".into(), &mut self.w2),
            ("mlp/b2".into(), &mut self.b2),
        ]
    }

    /// `[normal, fraud]` logits per row of `z`.
    fn logits(&self, z: &Array2<f64>) -> Array2<f64> {
        let h = (z.dot(&self.w1.t()) + &self.b1).mapv(crate::tape::elu);
        h.dot(&self.w2.t()) + &self.b2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeScore {
    pub node: usize,
    /// `log P(fraud) - log P(normal)`.
    pub score: f64,
    pub prediction: Label,
    pub label: Label,
}

/// Everything needed to score nodes: encoders, language model, prompt and
/// the optional classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct FraudModel {
    pub config: TrainConfig,
    pub template: PromptTemplate,
    pub vocab: Vocabulary,
    pub targets: TargetSequences,
    pub encoder: SageParams,
    pub lm: LanguageModel,
    pub head: Option<MlpHead>,
    prompt: Option<AssembledPrompt>,
}

pub fn load_template(spec: &str) -> Result<PromptTemplate> {
    if PromptTemplate::builtin_names().any(|n| n == spec) {
        PromptTemplate::builtin(spec)
    } else {
        PromptTemplate::from_path(Path::new(spec))
    }
}

fn prompt_for(mode: Mode, template: &PromptTemplate, vocab: &Vocabulary) -> Result<Option<AssembledPrompt>> {
    Ok(match mode {
        Mode::Full | Mode::WoJoint | Mode::WoLlm => Some(assemble_template(template, vocab, true)?),
        Mode::WoSemantics => Some(assemble_template(template, vocab, false)?),
        Mode::SingleView(j) => Some(assemble_template(&template.single_view(j)?, vocab, true)?),
        Mode::Flattened => None,
    })
}

impl FraudModel {
    pub fn init<R: Rng>(config: &TrainConfig, graph: &RelationalGraph, rng: &mut R) -> Result<Self> {
        config.validate_for(graph.relation_count())?;
        let template = load_template(&config.template)?.for_graph(graph)?;
        let vocab = template.vocabulary(&[&config.answers.fraud, &config.answers.normal])?;
        let enc_cfg = config.encoder_config();
        let encoder = SageParams::init(&enc_cfg, graph.feature_dim(), graph.relation_count(), rng);
        let lm = LanguageModel::init(&config.decoder, vocab.len(), rng)?;
        let head = (config.mode == Mode::WoLlm)
            .then(|| MlpHead::init(graph.relation_count() * enc_cfg.output_dim(), config.mlp_hidden, rng));
        Self::from_parts(config.clone(), template, vocab, encoder, lm, head)
    }

    pub fn from_parts(
        config: TrainConfig,
        template: PromptTemplate,
        vocab: Vocabulary,
        encoder: SageParams,
        lm: LanguageModel,
        head: Option<MlpHead>,
    ) -> Result<Self> {
        let targets = TargetSequences::new(&vocab, &config.answers.fraud, &config.answers.normal)?;
        let prompt = prompt_for(config.mode, &template, &vocab)?;
        if let Some(p) = &prompt {
            let needed = p.len() + targets.max_len() - 1;
            if config.mode.uses_lm() && needed > config.decoder.max_len {
                return Err(Error::SequenceTooLong {
                    len: needed,
                    max: config.decoder.max_len,
                });
            }
        }
        if lm.embedding().vocab_size() != vocab.len() {
            return Err(Error::Checkpoint(format!(
                "embedding table has {} rows for a vocabulary of {}",
                lm.embedding().vocab_size(),
                vocab.len()
            )));
        }
        if (config.mode == Mode::WoLlm) != head.is_some() {
            return Err(Error::Checkpoint("classifier head present in the wrong mode".into()));
        }
        Ok(Self {
            config,
            template,
            vocab,
            targets,
            encoder,
            lm,
            head,
            prompt,
        })
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn prompt(&self) -> Option<&AssembledPrompt> {
        self.prompt.as_ref()
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        self.config.encoder_config()
    }

    pub fn check_graph(&self, graph: &RelationalGraph) -> Result<()> {
        self.encoder
            .check_shapes(&self.encoder_config(), graph.feature_dim(), graph.relation_count())?;
        if self.template.relations.len() != graph.relation_count() {
            return Err(Error::Config(format!(
                "model has {} relation slots, graph has {} relations",
                self.template.relations.len(),
                graph.relation_count()
            )));
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = self.encoder.named();
        out.extend(self.lm.named());
        if let Some(h) = &self.head {
            out.extend(h.named());
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = self.encoder.named_mut();
        out.extend(self.lm.named_mut());
        if let Some(h) = self.head.as_mut() {
            out.extend(h.named_mut());
        }
        out
    }

    /// Names of the parameters optimized in this model's mode.
    pub fn trainable_names(&self) -> Vec<String> {
        let mode = self.mode();
        self.named()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| mode.trains(n))
            .collect()
    }

    fn scale_target(&self) -> Option<f64> {
        self.config
            .inject_scale_norm
            .then(|| self.lm.embedding().mean_row_norm())
    }

    /// Mean training loss over `nodes` and its gradient for every trainable
    /// parameter of the active mode.
    pub fn batch_objective(
        &self,
        graph: &RelationalGraph,
        ctx: &GraphContext,
        nodes: &[usize],
    ) -> Result<(f64, BTreeMap<String, Array2<f64>>)> {
        if nodes.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        let labels = nodes
            .iter()
            .map(|&v| match graph.label(v) {
                Label::Unlabeled => Err(Error::Unlabeled(v)),
                l => Ok(l),
            })
            .collect::<Result<Vec<_>>>()?;
        let mode = self.mode();
        let mut tape = Tape::new();
        let mut trained: Vec<(String, Var)> = Vec::new();

        let mut relation_out: Vec<Option<Var>> = vec![None; graph.relation_count()];
        if mode.uses_encoder() {
            let needed: Vec<usize> = match (&self.prompt, mode) {
                (_, Mode::WoLlm) => (0..graph.relation_count()).collect(),
                (Some(p), _) => p.relations.clone(),
                (None, _) => Vec::new(),
            };
            let features = tape.constant(graph.features().clone());
            for j in needed {
                let mut ws = Vec::new();
                for (l, w) in self.encoder.weights[j].iter().enumerate() {
                    let name = SageParams::param_name(j, l);
                    let grad = mode.trains(&name);
                    let var = tape.leaf(w.clone(), grad);
                    if grad {
                        trained.push((name, var));
                    }
                    ws.push(var);
                }
                let mut out = encode_relation_on_tape(&mut tape, &ctx.shared[j], features, &ws);
                if let Some(target) = self.scale_target() {
                    out = tape.row_rescale(out, target);
                }
                relation_out[j] = Some(out);
            }
        }

        let total = if let Some(head) = &self.head {
            let mut leaf = |tape: &mut Tape, name: &str, value: &Array2<f64>| {
                let v = tape.leaf(value.clone(), true);
                trained.push((name.to_string(), v));
                v
            };
            let w1 = leaf(&mut tape, "mlp/w1", &head.w1);
            let b1 = leaf(&mut tape, "mlp/b1", &head.b1);
            let w2 = leaf(&mut tape, "mlp/w2", &head.w2);
            let b2 = leaf(&mut tape, "mlp/b2", &head.b2);
            let parts: Vec<Var> = relation_out
                .iter()
                .map(|o| tape.gather_rows(o.expect("all relations encoded"), nodes))
                .collect();
            let z = tape.concat_cols(&parts);
            let h = tape.matmul_t(z, w1);
            let h = tape.add_row(h, b1);
            let h = tape.elu(h);
            let logits = tape.matmul_t(h, w2);
            let logits = tape.add_row(logits, b2);
            let picks: Vec<(usize, usize)> = labels.iter().enumerate().map(|(i, l)| (i, l.code() as usize)).collect();
            tape.log_softmax_pick(logits, &picks)
        } else {
            let vars = self.lm.bind(&mut tape, &|n| mode.trains(n));
            trained.extend(vars.trainable.iter().cloned());
            let e_temp = match &self.prompt {
                Some(p) => Some(tape.constant(embed(&p.tokens, self.lm.embedding())?)),
                None => None,
            };
            let mut total: Option<Var> = None;
            for (&v, &y) in nodes.iter().zip(&labels) {
                let input = match (&self.prompt, e_temp) {
                    (Some(p), Some(e_temp)) => {
                        let rows: Vec<Var> = p
                            .relations
                            .iter()
                            .map(|&j| tape.gather_rows(relation_out[j].expect("encoded above"), &[v]))
                            .collect();
                        let h = if rows.len() == 1 {
                            rows[0]
                        } else {
                            tape.concat_rows(&rows)
                        };
                        tape.inject_rows(e_temp, h, &p.positions)
                    }
                    _ => {
                        let tokens = self.flattened_tokens(graph, ctx, v)?;
                        tape.constant(embed(&tokens, self.lm.embedding())?)
                    }
                };
                let lp = sequence_logprob_on_tape(&mut tape, &self.lm, &vars, input, self.targets.get(y)?)?;
                total = Some(match total {
                    Some(t) => tape.add(t, lp),
                    None => lp,
                });
            }
            total.expect("non-empty batch")
        };
        let loss = tape.scale(total, -1.0 / nodes.len() as f64);
        let value = tape.scalar(loss);
        let mut grads = tape.backward(loss);
        let mut out = BTreeMap::new();
        for (name, var) in trained {
            if let Some(g) = grads.take(var) {
                out.insert(name, g);
            }
        }
        Ok((value, out))
    }

    pub fn flattened_tokens(&self, graph: &RelationalGraph, ctx: &GraphContext, node: usize) -> Result<Vec<usize>> {
        let flat = flatten_features(
            node,
            graph,
            &ctx.plain_views,
            &self.template,
            self.config.flatten_digits,
        )?;
        self.vocab.encode(&flat.text)
    }

    /// Relation embeddings of every node, or `None` when the mode has no
    /// encoder.
    pub fn relation_embeddings(
        &self,
        graph: &RelationalGraph,
        ctx: &GraphContext,
    ) -> Result<Option<RelationEmbeddings>> {
        if !self.mode().uses_encoder() {
            return Ok(None);
        }
        encode_all(graph, &ctx.encoder_views, &self.encoder, &self.encoder_config()).map(Some)
    }

    /// Prompt embedding with the node's structure vectors injected.
    pub fn input_embedding(&self, emb: &RelationEmbeddings, node: usize) -> Result<Array2<f64>> {
        let p = self
            .prompt
            .as_ref()
            .ok_or_else(|| Error::Config("flattened mode has no soft prompt".into()))?;
        let mut h = emb.node(node).select(Axis(0), &p.relations);
        if let Some(target) = self.scale_target() {
            for mut row in h.outer_iter_mut() {
                let n = row.dot(&row).sqrt();
                if n > 0.0 {
                    row *= target / n;
                }
            }
        }
        let e_temp = embed(&p.tokens, self.lm.embedding())?;
        crate::prompt::inject_structure(&e_temp, h.view(), &p.positions)
    }

    /// Anomaly score and prediction for each node.
    pub fn score_nodes(&self, graph: &RelationalGraph, ctx: &GraphContext, nodes: &[usize]) -> Result<Vec<NodeScore>> {
        self.check_graph(graph)?;
        let emb = self.relation_embeddings(graph, ctx)?;
        let scores: Vec<f64> = if let Some(head) = &self.head {
            let emb = emb.as_ref().expect("head modes encode");
            let m = emb.relation_count();
            let d = emb.dim();
            let mut z = Array2::zeros((nodes.len(), m * d));
            for (i, &v) in nodes.iter().enumerate() {
                for j in 0..m {
                    z.row_mut(i)
                        .slice_mut(ndarray::s![j * d..(j + 1) * d])
                        .assign(&emb.node(v).row(j));
                }
            }
            let logits = head.logits(&z);
            logits.outer_iter().map(|r| r[1] - r[0]).collect()
        } else {
            nodes
                .iter()
                .map(|&v| {
                    let input = match &emb {
                        Some(emb) => self.input_embedding(emb, v)?,
                        None => embed(&self.flattened_tokens(graph, ctx, v)?, self.lm.embedding())?,
                    };
                    Ok(score_from_logprobs(answer_logprobs(&self.lm, &input, &self.targets)?))
                })
                .collect::<Result<_>>()?
        };
        Ok(nodes
            .iter()
            .zip(scores)
            .map(|(&node, score)| NodeScore {
                node,
                score,
                prediction: label_from_score(score),
                label: graph.label(node),
            })
            .collect())
    }
}
