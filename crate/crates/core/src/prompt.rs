//! Hybrid prompt templates, soft-prompt injection and the text-flattened
//! baseline prompt.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::backbone::Vocabulary;
use crate::error::{Error, Result};
use crate::relgraph::{RelationalGraph, SubgraphView};

/// Marker emitted in flattened prompts for relations without neighbors.
pub const NO_NEIGHBORS: &str = "no neighbors";

const BUILTIN: [(&str, &str); 4] = [
    ("generic", include_str!("../templates/generic.json")),
    ("amazon", include_str!("../templates/amazon.json")),
    ("yelpchi", include_str!("../templates/yelpchi.json")),
    ("sffsd", include_str!("../templates/sffsd.json")),
];

fn default_cue() -> String {
    "A:".into()
}

fn default_separator() -> String {
    ":".into()
}

fn default_target() -> String {
    "object node features".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationSlot {
    /// Surface form of the special token, e.g. `<|graph_pad_relation1|>`.
    pub token: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flattened_description: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub instruction: String,
    pub relations: Vec<RelationSlot>,
    pub question: String,
    /// The only text kept when semantics are stripped.
    #[serde(default = "default_cue")]
    pub answer_cue: String,
    /// Placed between a special token and its description.
    #[serde(default = "default_separator")]
    pub separator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flattened_instruction: Option<String>,
    #[serde(default = "default_target")]
    pub flattened_target: String,
}

pub fn special_surface(j: usize) -> String {
    format!("<|graph_pad_relation{}|>", j + 1)
}

impl PromptTemplate {
    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(n, _)| *n)
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let (_, text) = BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Template(format!("no built-in template named `{name}`")))?;
        Self::from_json(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Template(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Fills an empty relation list from the graph's relation descriptions;
    /// otherwise checks that the template has one slot per relation.
    pub fn for_graph(mut self, graph: &RelationalGraph) -> Result<Self> {
        if self.relations.is_empty() {
            self.relations = graph
                .relations()
                .iter()
                .map(|r| RelationSlot {
                    token: special_surface(r.id),
                    description: r.description.clone(),
                    flattened_description: None,
                })
                .collect();
        }
        if self.relations.len() != graph.relation_count() {
            return Err(Error::Template(format!(
                "template has {} relation slots, graph has {} relations",
                self.relations.len(),
                graph.relation_count()
            )));
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.relations.is_empty() {
            return Err(Error::Template("no relation slots".into()));
        }
        let mut seen = HashSet::new();
        for slot in &self.relations {
            if !(slot.token.starts_with("<|") && slot.token.ends_with("|>")) {
                return Err(Error::Template(format!(
                    "special token `{}` must look like <|...|>",
                    slot.token
                )));
            }
            if !seen.insert(slot.token.as_str()) {
                return Err(Error::Template(format!("special token `{}` appears twice", slot.token)));
            }
        }
        if self.answer_cue.trim().is_empty() {
            return Err(Error::Template("empty answer cue".into()));
        }
        Ok(())
    }

    /// Keeps only the pair for relation `j`; the instruction and question are
    /// unchanged.
    pub fn single_view(&self, j: usize) -> Result<Self> {
        let slot =
            self.relations.get(j).cloned().ok_or_else(|| {
                Error::Template(format!("view {j} out of range for {} relations", self.relations.len()))
            })?;
        Ok(Self {
            relations: vec![slot],
            ..self.clone()
        })
    }

    fn texts(&self) -> Vec<&str> {
        let mut out = vec![
            self.instruction.as_str(),
            self.question.as_str(),
            self.answer_cue.as_str(),
            self.separator.as_str(),
            self.flattened_target.as_str(),
            NO_NEIGHBORS,
        ];
        if let Some(f) = &self.flattened_instruction {
            out.push(f);
        }
        for slot in &self.relations {
            out.push(&slot.description);
            if let Some(f) = &slot.flattened_description {
                out.push(f);
            }
        }
        out
    }

    /// Closed vocabulary over every template text plus `answers`, with one
    /// special token per relation slot.
    pub fn vocabulary(&self, answers: &[&str]) -> Result<Vocabulary> {
        self.validate()?;
        let mut texts = self.texts();
        texts.extend_from_slice(answers);
        let specials = self.relations.iter().map(|s| s.token.clone()).collect();
        Vocabulary::from_texts(texts, specials)
    }
}

/// Token sequence with the positions of its special tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssembledPrompt {
    pub tokens: Vec<usize>,
    /// `positions[k]` holds the special token of relation `relations[k]`.
    pub positions: Vec<usize>,
    pub relations: Vec<usize>,
}

impl AssembledPrompt {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// With semantics on: instruction, then each special token followed by its
/// description, then the question. With semantics off: the special tokens
/// followed by the answer cue.
pub fn assemble_template(template: &PromptTemplate, vocab: &Vocabulary, semantics: bool) -> Result<AssembledPrompt> {
    template.validate()?;
    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    let mut relations = Vec::new();
    if semantics {
        tokens.extend(vocab.encode(&template.instruction)?);
    }
    for slot in &template.relations {
        let id = vocab
            .special_by_surface(&slot.token)
            .ok_or_else(|| Error::OutOfVocabulary(slot.token.clone()))?;
        positions.push(tokens.len());
        relations.push(id - vocab.base_len());
        tokens.push(id);
        if semantics {
            tokens.extend(vocab.encode(&template.separator)?);
            tokens.extend(vocab.encode(&slot.description)?);
        }
    }
    if semantics {
        tokens.extend(vocab.encode(&template.question)?);
    } else {
        tokens.extend(vocab.encode(&template.answer_cue)?);
    }
    Ok(AssembledPrompt {
        tokens,
        positions,
        relations,
    })
}

fn check_positions(len: usize, positions: &[usize]) -> Result<()> {
    let mut seen = HashSet::new();
    for &p in positions {
        if p >= len {
            return Err(Error::Injection(format!("position {p} out of range for length {len}")));
        }
        if !seen.insert(p) {
            return Err(Error::Injection(format!("position {p} used twice")));
        }
    }
    Ok(())
}

/// Replaces row `positions[k]` of `e_temp` with row `k` of `h`.
pub fn inject_structure(e_temp: &Array2<f64>, h: ArrayView2<'_, f64>, positions: &[usize]) -> Result<Array2<f64>> {
    if h.nrows() != positions.len() {
        return Err(Error::Injection(format!(
            "{} structure vectors for {} positions",
            h.nrows(),
            positions.len()
        )));
    }
    if h.ncols() != e_temp.ncols() {
        return Err(Error::Injection(format!(
            "structure width {} differs from embedding width {}",
            h.ncols(),
            e_temp.ncols()
        )));
    }
    check_positions(e_temp.nrows(), positions)?;
    let mut out = e_temp.clone();
    for (k, &p) in positions.iter().enumerate() {
        out.row_mut(p).assign(&h.row(k));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlattenedPrompt {
    pub text: String,
    pub target: Vec<String>,
    /// Formatted neighbor means per relation; `None` when a relation has no
    /// neighbors for this node.
    pub neighbors: Vec<Option<Vec<String>>>,
}

fn format_values(values: impl Iterator<Item = f64>, digits: usize) -> Vec<String> {
    values.map(|v| format!("{v:.digits$}")).collect()
}

/// Hard-prompt baseline: the node's features and the mean of its 1-hop
/// neighbors' features in each view, written out as decimal literals.
pub fn flatten_features(
    node: usize,
    graph: &RelationalGraph,
    views: &[SubgraphView],
    template: &PromptTemplate,
    digits: usize,
) -> Result<FlattenedPrompt> {
    if node >= graph.node_count() {
        return Err(Error::Graph(format!("node {node} out of range")));
    }
    if views.len() != template.relations.len() {
        return Err(Error::Template(format!(
            "{} views for {} relation slots",
            views.len(),
            template.relations.len()
        )));
    }
    let features = graph.features();
    let target = format_values(features.row(node).iter().copied(), digits);
    let sep = &template.separator;
    let mut parts = vec![
        template
            .flattened_instruction
            .clone()
            .unwrap_or_else(|| template.instruction.clone()),
        format!("{} {sep} {}", template.flattened_target, target.join(", ")),
    ];
    let mut neighbors = Vec::with_capacity(views.len());
    for (slot, view) in template.relations.iter().zip(views) {
        let desc = slot.flattened_description.as_deref().unwrap_or(&slot.description);
        let nbrs = view.neighbors(node);
        if nbrs.is_empty() {
            parts.push(format!("{desc} {sep} {NO_NEIGHBORS}"));
            neighbors.push(None);
        } else {
            let mut mean = vec![0.0; graph.feature_dim()];
            for &u in nbrs {
                for (m, x) in mean.iter_mut().zip(features.row(u)) {
                    *m += x;
                }
            }
            let lits = format_values(mean.iter().map(|m| m / nbrs.len() as f64), digits);
            parts.push(format!("{desc} {sep} {}", lits.join(", ")));
            neighbors.push(Some(lits));
        }
    }
    parts.push(template.question.clone());
    Ok(FlattenedPrompt {
        text: parts.join(" "),
        target,
        neighbors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relgraph::{partition_relations, Label, Relation};

    fn toy_graph() -> RelationalGraph {
        let features = Array2::from_shape_vec((3, 2), vec![1.0, 2.5, -0.5, 0.25, 3.0, 1.0]).unwrap();
        let relations = (0..2)
            .map(|id| Relation {
                id,
                name: format!("r{id}"),
                description: format!("relation {id} links accounts"),
                directed: false,
            })
            .collect();
        RelationalGraph::new(
            features,
            vec![Label::Fraud, Label::Normal, Label::Normal],
            relations,
            vec![vec![(0, 1), (0, 2)], vec![(1, 2)]],
        )
        .unwrap()
    }

    #[test]
    fn builtin_templates_parse() {
        for name in PromptTemplate::builtin_names() {
            let t = PromptTemplate::builtin(name).unwrap();
            if name != "generic" {
                t.validate().unwrap();
                t.vocabulary(&["fraud", "normal"]).unwrap();
            }
        }
        assert_eq!(PromptTemplate::builtin("amazon").unwrap().relations.len(), 3);
        assert_eq!(PromptTemplate::builtin("sffsd").unwrap().relations.len(), 4);
    }

    #[test]
    fn assemble_orders_specials() {
        let t = PromptTemplate::builtin("yelpchi").unwrap();
        let v = t.vocabulary(&["fraud", "normal"]).unwrap();
        let p = assemble_template(&t, &v, true).unwrap();
        let specials: Vec<usize> = p.tokens.iter().copied().filter(|&x| v.is_special(x)).collect();
        assert_eq!(
            specials,
            vec![v.special(0).unwrap(), v.special(1).unwrap(), v.special(2).unwrap()]
        );
        let scanned: Vec<usize> = (0..p.len()).filter(|&k| v.is_special(p.tokens[k])).collect();
        assert_eq!(scanned, p.positions);
        assert_eq!(p.relations, vec![0, 1, 2]);
    }

    #[test]
    fn semantics_off_keeps_only_specials_and_cue() {
        let g = toy_graph();
        let t = PromptTemplate::builtin("generic").unwrap().for_graph(&g).unwrap();
        let v = t.vocabulary(&["fraud", "normal"]).unwrap();
        let p = assemble_template(&t, &v, false).unwrap();
        assert_eq!(p.positions, vec![0, 1]);
        assert_eq!(v.decode(&p.tokens[2..]).unwrap(), "A:");
    }

    #[test]
    fn single_view_keeps_relation_identity() {
        let t = PromptTemplate::builtin("amazon").unwrap();
        let v = t.vocabulary(&["fraud", "normal"]).unwrap();
        let p = assemble_template(&t.single_view(2).unwrap(), &v, true).unwrap();
        assert_eq!(p.relations, vec![2]);
        assert_eq!(p.tokens[p.positions[0]], v.special(2).unwrap());
        assert!(t.single_view(3).is_err());
    }

    #[test]
    fn injection_replaces_exactly_the_positions() {
        let e = Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64);
        let h = Array2::from_elem((1, 3), -1.0);
        let out = inject_structure(&e, h.view(), &[2]).unwrap();
        for i in 0..5 {
            if i == 2 {
                assert_eq!(out.row(i), h.row(0));
            } else {
                assert_eq!(out.row(i), e.row(i));
            }
        }
        assert!(inject_structure(&e, h.view(), &[5]).is_err());
        let h2 = Array2::zeros((2, 3));
        assert!(matches!(
            inject_structure(&e, h2.view(), &[1, 1]),
            Err(Error::Injection(_))
        ));
    }

    #[test]
    fn flatten_formats_and_marks_isolated() {
        let g = toy_graph();
        let t = PromptTemplate::builtin("generic").unwrap().for_graph(&g).unwrap();
        let views = partition_relations(&g);
        let f = flatten_features(0, &g, &views, &t, 2).unwrap();
        assert!(f.text.contains("1.00, 2.50"));
        assert_eq!(
            f.neighbors[0].as_deref(),
            Some(&["1.25".to_string(), "0.62".to_string()][..])
        );
        assert!(f.neighbors[1].is_none());
        assert!(f.text.contains(NO_NEIGHBORS));
        assert!(!f.text.contains("<|"));
        let v = t.vocabulary(&["fraud", "normal"]).unwrap();
        v.encode(&f.text).unwrap();
    }
}
