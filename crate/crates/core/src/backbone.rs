//! A small decoder-only causal language model.
//!
//! Pre-norm residual blocks with multi-head causal self-attention and a GELU
//! feed-forward layer, learned absolute positions, and an output head tied
//! to the token embedding table. Low-rank adapters sit on the query and value
//! projections: `W·x + (α/r)·B·(A·x)`, with `B` zero at initialization.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Characters that numeric literals are split into when a number is not a
/// vocabulary word.
pub const NUMERIC_CHARS: [&str; 13] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9", ".", "-", ","];

fn is_special_surface(s: &str) -> bool {
    s.starts_with("<|") && s.ends_with("|>")
}

/// Word-level vocabulary with special tokens appended after the base words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    base_len: usize,
}

impl Vocabulary {
    pub fn new(base: Vec<String>, specials: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in base.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Template(format!("invalid token `{t}`")));
            }
            if is_special_surface(t) {
                return Err(Error::Template(format!("base token `{t}` looks like a special token")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Template(format!("duplicate token `{t}`")));
            }
        }
        let base_len = base.len();
        for (j, s) in specials.iter().enumerate() {
            if !is_special_surface(s) {
                return Err(Error::Template(format!("special token `{s}` must look like <|...|>")));
            }
            if index.insert(s.clone(), base_len + j).is_some() {
                return Err(Error::Template(format!("duplicate token `{s}`")));
            }
        }
        let mut tokens = base;
        tokens.extend(specials);
        Ok(Self {
            tokens,
            index,
            base_len,
        })
    }

    /// Collects words in first-appearance order from `texts`, plus the
    /// numeric characters, then appends `specials`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, specials: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        let mut base = Vec::new();
        let numeric = NUMERIC_CHARS.iter().copied();
        for word in texts.into_iter().flat_map(str::split_whitespace).chain(numeric) {
            if is_special_surface(word) {
                continue;
            }
            if seen.insert(word.to_string()) {
                base.push(word.to_string());
            }
        }
        Self::new(base, specials)
    }

    /// Rebuilds a vocabulary from its serialized token list; trailing
    /// `<|...|>` entries are the specials.
    pub fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        let base_len = tokens
            .iter()
            .position(|t| is_special_surface(t))
            .unwrap_or(tokens.len());
        let specials = tokens[base_len..].to_vec();
        let base = tokens[..base_len].to_vec();
        Self::new(base, specials)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn base_len(&self) -> usize {
        self.base_len
    }

    pub fn special_count(&self) -> usize {
        self.tokens.len() - self.base_len
    }

    /// Index of special token `s_j` (0-based `j`).
    pub fn special(&self, j: usize) -> Option<usize> {
        (j < self.special_count()).then_some(self.base_len + j)
    }

    pub fn special_by_surface(&self, surface: &str) -> Option<usize> {
        self.index.get(surface).copied().filter(|&i| i >= self.base_len)
    }

    pub fn is_special(&self, index: usize) -> bool {
        index >= self.base_len && index < self.tokens.len()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied().filter(|&i| i < self.base_len)
    }

    /// Whitespace tokenization. Words outside the vocabulary that consist
    /// only of numeric characters are split into one token per character.
    /// Special tokens are never produced from text.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            if let Some(id) = self.id(word) {
                out.push(id);
                continue;
            }
            let chars: Option<Vec<usize>> = word
                .chars()
                .map(|c| {
                    let mut buf = [0u8; 4];
                    self.id(c.encode_utf8(&mut buf))
                        .filter(|_| NUMERIC_CHARS.contains(&&*c.encode_utf8(&mut [0u8; 4])))
                })
                .collect();
            match chars {
                Some(ids) if !ids.is_empty() => out.extend(ids),
                _ => return Err(Error::OutOfVocabulary(word.to_string())),
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&i| {
                self.tokens.get(i).map(String::as_str).ok_or(Error::TokenIndex {
                    index: i,
                    size: self.tokens.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Value,
}

impl Projection {
    fn tag(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Value => "v",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_emb: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_targets: Vec<Projection>,
    /// Standard deviation of the normal initialization of the base weights.
    pub init_std: f64,
    /// Standard deviation for the token embedding table, which is also the
    /// output head; `init_std` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_init_std: Option<f64>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_emb: 64,
            ffn: 256,
            max_len: 256,
            lora_rank: 4,
            lora_alpha: 8.0,
            lora_targets: vec![Projection::Query, Projection::Value],
            init_std: 0.02,
            embed_init_std: None,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_emb == 0 || self.ffn == 0 || self.max_len == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if !self.d_emb.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_emb {} is not divisible by {} heads",
                self.d_emb, self.heads
            )));
        }
        if self.lora_rank == 0 && !self.lora_targets.is_empty() {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        Ok(())
    }
}

/// Token embedding matrix `W_e`, one row per vocabulary entry.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub weights: Array2<f64>,
}

impl EmbeddingTable {
    pub fn vocab_size(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Mean Euclidean norm of the rows.
    pub fn mean_row_norm(&self) -> f64 {
        let total: f64 = self.weights.outer_iter().map(|r| r.dot(&r).sqrt()).sum();
        total / self.weights.nrows().max(1) as f64
    }
}

/// Row lookup: row `k` of the output is `W_e[tokens[k]]`.
pub fn embed(tokens: &[usize], table: &EmbeddingTable) -> Result<Array2<f64>> {
    if let Some(&bad) = tokens.iter().find(|&&t| t >= table.vocab_size()) {
        return Err(Error::TokenIndex {
            index: bad,
            size: table.vocab_size(),
        });
    }
    Ok(table.weights.select(ndarray::Axis(0), tokens))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_gain: Array2<f64>,
    pub ln1_bias: Array2<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2_gain: Array2<f64>,
    pub ln2_bias: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl Block {
    fn tensors(&self) -> [(&'static str, &Array2<f64>); 12] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Array2<f64>); 12] {
        [
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

/// Base (frozen) transformer weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub embedding: EmbeddingTable,
    pub positions: Array2<f64>,
    pub blocks: Vec<Block>,
    pub final_gain: Array2<f64>,
    pub final_bias: Array2<f64>,
}

impl Decoder {
    pub fn init<R: Rng>(config: &DecoderConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let gaussian = |std: f64| Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()));
        let normal = gaussian(config.init_std)?;
        let embed_normal = gaussian(config.embed_init_std.unwrap_or(config.init_std))?;
        let d = config.d_emb;
        let embedding = EmbeddingTable {
            weights: Array2::from_shape_fn((vocab_size, d), |_| embed_normal.sample(rng)),
        };
        let mut draw = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| normal.sample(rng));
        let positions = draw(config.max_len, d);
        let blocks = (0..config.layers)
            .map(|_| Block {
                ln1_gain: Array2::ones((1, d)),
                ln1_bias: Array2::zeros((1, d)),
                wq: draw(d, d),
                wk: draw(d, d),
                wv: draw(d, d),
                wo: draw(d, d),
                ln2_gain: Array2::ones((1, d)),
                ln2_bias: Array2::zeros((1, d)),
                w1: draw(config.ffn, d),
                b1: Array2::zeros((1, config.ffn)),
                w2: draw(d, config.ffn),
                b2: Array2::zeros((1, d)),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            embedding,
            positions,
            blocks,
            final_gain: Array2::ones((1, d)),
            final_bias: Array2::zeros((1, d)),
        })
    }

    pub fn named(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![
            ("lm/embed".to_string(), &self.embedding.weights),
            ("lm/pos".to_string(), &self.positions),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.tensors() {
                out.push((format!("lm/block{i}/{name}"), t));
            }
        }
        out.push(("lm/final/gain".to_string(), &self.final_gain));
        out.push(("lm/final/bias".to_string(), &self.final_bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = vec![
            ("lm/embed".to_string(), &mut self.embedding.weights),
            ("lm/pos".to_string(), &mut self.positions),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in b.tensors_mut() {
                out.push((format!("lm/block{i}/{name}"), t));
            }
        }
        out.push(("lm/final/gain".to_string(), &mut self.final_gain));
        out.push(("lm/final/bias".to_string(), &mut self.final_bias));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    /// `r × d_in`
    pub a: Array2<f64>,
    /// `d_out × r`, zero at initialization.
    pub b: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraSet {
    pub rank: usize,
    pub alpha: f64,
    pub adapters: BTreeMap<(usize, Projection), LoraAdapter>,
}

impl LoraSet {
    pub fn empty() -> Self {
        Self {
            rank: 0,
            alpha: 0.0,
            adapters: BTreeMap::new(),
        }
    }

    /// `A ~ U(±1/sqrt(d_in))`, `B = 0`.
    pub fn init<R: Rng>(config: &DecoderConfig, rng: &mut R) -> Self {
        let d = config.d_emb;
        let bound = 1.0 / (d as f64).sqrt();
        let mut adapters = BTreeMap::new();
        for layer in 0..config.layers {
            for &proj in &config.lora_targets {
                adapters.insert(
                    (layer, proj),
                    LoraAdapter {
                        a: Array2::from_shape_fn((config.lora_rank, d), |_| rng.random_range(-bound..bound)),
                        b: Array2::zeros((d, config.lora_rank)),
                    },
                );
            }
        }
        Self {
            rank: config.lora_rank,
            alpha: config.lora_alpha,
            adapters,
        }
    }

    pub fn scaling(&self) -> f64 {
        if self.rank == 0 {
            0.0
        } else {
            self.alpha / self.rank as f64
        }
    }

    pub fn param_name(layer: usize, proj: Projection, which: char) -> String {
        format!("lora/block{layer}.{}/{which}", proj.tag())
    }

    pub fn named(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        for (&(layer, proj), ad) in &self.adapters {
            out.push((Self::param_name(layer, proj, 'A'), &ad.a));
            out.push((Self::param_name(layer, proj, 'B'), &ad.b));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = Vec::new();
        for (&(layer, proj), ad) in self.adapters.iter_mut() {
            out.push((Self::param_name(layer, proj, 'A'), &mut ad.a));
            out.push((Self::param_name(layer, proj, 'B'), &mut ad.b));
        }
        out
    }
}

/// The trainable adapter matrices `{A_l, B_l}`; base weights are never part
/// of this set.
pub fn lora_trainable(adapters: &LoraSet) -> Vec<(String, &Array2<f64>)> {
    adapters.named()
}

/// Base decoder plus adapters, with a forward-pass counter.
#[derive(Debug)]
pub struct LanguageModel {
    pub decoder: Decoder,
    pub lora: LoraSet,
    forward_calls: AtomicUsize,
}

impl Clone for LanguageModel {
    fn clone(&self) -> Self {
        Self {
            decoder: self.decoder.clone(),
            lora: self.lora.clone(),
            forward_calls: AtomicUsize::new(self.forward_calls()),
        }
    }
}

impl PartialEq for LanguageModel {
    fn eq(&self, other: &Self) -> bool {
        self.decoder == other.decoder && self.lora == other.lora
    }
}

pub struct BlockVars {
    ln1: (Var, Var),
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ln2: (Var, Var),
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    lora_q: Option<(Var, Var)>,
    lora_v: Option<(Var, Var)>,
}

/// Tape handles for every language-model tensor.
pub struct LmVars {
    pub embed: Var,
    pos: Var,
    blocks: Vec<BlockVars>,
    final_ln: (Var, Var),
    /// Trainable leaves by checkpoint name.
    pub trainable: Vec<(String, Var)>,
}

impl LanguageModel {
    pub fn new(decoder: Decoder, lora: LoraSet) -> Self {
        Self {
            decoder,
            lora,
            forward_calls: AtomicUsize::new(0),
        }
    }

    pub fn init<R: Rng>(config: &DecoderConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        let decoder = Decoder::init(config, vocab_size, rng)?;
        let lora = LoraSet::init(config, rng);
        Ok(Self::new(decoder, lora))
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.decoder.config
    }

    pub fn embedding(&self) -> &EmbeddingTable {
        &self.decoder.embedding
    }

    /// Number of transformer forward passes run so far.
    pub fn forward_calls(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }

    pub fn named(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = self.decoder.named();
        out.extend(self.lora.named());
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = self.decoder.named_mut();
        out.extend(self.lora.named_mut());
        out
    }

    /// Puts every tensor on the tape. `trainable(name)` decides which leaves
    /// track gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: &dyn Fn(&str) -> bool) -> LmVars {
        let mut trained = Vec::new();
        let mut put = |tape: &mut Tape, name: String, value: &Array2<f64>| {
            let grad = trainable(&name);
            let v = tape.leaf(value.clone(), grad);
            if grad {
                trained.push((name, v));
            }
            v
        };
        let dec = &self.decoder;
        let embed = put(tape, "lm/embed".into(), &dec.embedding.weights);
        let pos = put(tape, "lm/pos".into(), &dec.positions);
        let mut blocks = Vec::with_capacity(dec.blocks.len());
        for (i, b) in dec.blocks.iter().enumerate() {
            let mut lora_for = |tape: &mut Tape, proj: Projection| {
                self.lora.adapters.get(&(i, proj)).map(|ad| {
                    let a = put(tape, LoraSet::param_name(i, proj, 'A'), &ad.a);
                    let bb = put(tape, LoraSet::param_name(i, proj, 'B'), &ad.b);
                    (a, bb)
                })
            };
            let lora_q = lora_for(tape, Projection::Query);
            let lora_v = lora_for(tape, Projection::Value);
            let p = |n: &str| format!("lm/block{i}/{n}");
            blocks.push(BlockVars {
                ln1: (
                    put(tape, p("ln1_gain"), &b.ln1_gain),
                    put(tape, p("ln1_bias"), &b.ln1_bias),
                ),
                wq: put(tape, p("wq"), &b.wq),
                wk: put(tape, p("wk"), &b.wk),
                wv: put(tape, p("wv"), &b.wv),
                wo: put(tape, p("wo"), &b.wo),
                ln2: (
                    put(tape, p("ln2_gain"), &b.ln2_gain),
                    put(tape, p("ln2_bias"), &b.ln2_bias),
                ),
                w1: put(tape, p("w1"), &b.w1),
                b1: put(tape, p("b1"), &b.b1),
                w2: put(tape, p("w2"), &b.w2),
                b2: put(tape, p("b2"), &b.b2),
                lora_q,
                lora_v,
            });
        }
        let final_ln = (
            put(tape, "lm/final/gain".into(), &dec.final_gain),
            put(tape, "lm/final/bias".into(), &dec.final_bias),
        );
        LmVars {
            embed,
            pos,
            blocks,
            final_ln,
            trainable: trained,
        }
    }

    /// Final normalized hidden states (`L × d_emb`) for an input embedding
    /// sequence.
    pub fn hidden_on_tape(&self, tape: &mut Tape, vars: &LmVars, input: Var) -> Result<Var> {
        let cfg = &self.decoder.config;
        let (len, width) = tape.shape(input);
        if width != cfg.d_emb {
            return Err(Error::shape(
                "forward",
                format!("input width {width}, expected {}", cfg.d_emb),
            ));
        }
        if len > cfg.max_len {
            return Err(Error::SequenceTooLong { len, max: cfg.max_len });
        }
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let scaling = self.lora.scaling();
        let head_dim = cfg.d_emb / cfg.heads;
        let inv_sqrt = 1.0 / (head_dim as f64).sqrt();

        let pos = tape.slice_rows(vars.pos, 0, len);
        let mut x = tape.add(input, pos);
        for b in &vars.blocks {
            let h = tape.layer_norm(x, b.ln1.0, b.ln1.1);
            let q = project(tape, h, b.wq, b.lora_q, scaling);
            let k = tape.matmul_t(h, b.wk);
            let v = project(tape, h, b.wv, b.lora_v, scaling);
            let mut heads = Vec::with_capacity(cfg.heads);
            for hd in 0..cfg.heads {
                let (lo, hi) = (hd * head_dim, (hd + 1) * head_dim);
                let qh = tape.slice_cols(q, lo, hi);
                let kh = tape.slice_cols(k, lo, hi);
                let vh = tape.slice_cols(v, lo, hi);
                let scores = tape.matmul_t(qh, kh);
                let scores = tape.scale(scores, inv_sqrt);
                let probs = tape.causal_softmax(scores, 0);
                heads.push(tape.matmul(probs, vh));
            }
            let att = if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat_cols(&heads)
            };
            let o = tape.matmul_t(att, b.wo);
            x = tape.add(x, o);
            let h2 = tape.layer_norm(x, b.ln2.0, b.ln2.1);
            let f = tape.matmul_t(h2, b.w1);
            let f = tape.add_row(f, b.b1);
            let f = tape.gelu(f);
            let f = tape.matmul_t(f, b.w2);
            let f = tape.add_row(f, b.b2);
            x = tape.add(x, f);
        }
        Ok(tape.layer_norm(x, vars.final_ln.0, vars.final_ln.1))
    }

    /// Tied output head: `hidden · W_eᵀ`.
    pub fn logits_on_tape(&self, tape: &mut Tape, vars: &LmVars, hidden: Var) -> Var {
        tape.matmul_t(hidden, vars.embed)
    }
}

fn project(tape: &mut Tape, h: Var, w: Var, lora: Option<(Var, Var)>, scaling: f64) -> Var {
    let base = tape.matmul_t(h, w);
    match lora {
        Some((a, b)) => {
            let down = tape.matmul_t(h, a);
            let up = tape.matmul_t(down, b);
            let up = tape.scale(up, scaling);
            tape.add(base, up)
        }
        None => base,
    }
}

/// Logits over the vocabulary at every position of `input` (`L × d_emb`).
pub fn forward_logits(model: &LanguageModel, input: &Array2<f64>) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, &|_| false);
    let x = tape.constant(input.clone());
    let hidden = model.hidden_on_tape(&mut tape, &vars, x)?;
    let logits = model.logits_on_tape(&mut tape, &vars, hidden);
    Ok(tape.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> DecoderConfig {
        DecoderConfig {
            layers: 2,
            heads: 2,
            d_emb: 8,
            ffn: 16,
            max_len: 12,
            init_std: 0.3,
            ..DecoderConfig::default()
        }
    }

    fn random_input(rng: &mut ChaCha8Rng, len: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((len, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn vocabulary_round_trips_in_vocabulary_text() {
        let v = Vocabulary::from_texts(
            ["Is this node fraudulent or normal? A:", "fraud normal"],
            vec!["<|s1|>".into()],
        )
        .unwrap();
        let text = "Is this node normal? A: fraud";
        assert_eq!(v.decode(&v.encode(text).unwrap()).unwrap(), text);
        assert_eq!(v.special(0), Some(v.base_len()));
        assert!(v.encode("<|s1|>").is_err());
        assert!(matches!(v.encode("unknown"), Err(Error::OutOfVocabulary(_))));
    }

    #[test]
    fn numeric_literals_split_into_characters() {
        let v = Vocabulary::from_texts(["a"], vec![]).unwrap();
        let ids = v.encode("-1.25,").unwrap();
        assert_eq!(v.decode(&ids).unwrap(), "- 1 . 2 5 ,");
    }

    #[test]
    fn token_list_round_trip() {
        let v = Vocabulary::from_texts(["x y"], vec!["<|a|>".into(), "<|b|>".into()]).unwrap();
        let back = Vocabulary::from_token_list(v.tokens().to_vec()).unwrap();
        assert_eq!(v, back);
        assert_eq!(back.special_count(), 2);
    }

    #[test]
    fn embed_is_row_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = EmbeddingTable {
            weights: random_input(&mut rng, 7, 3),
        };
        let tokens = [4, 0, 6, 4];
        let batch = embed(&tokens, &table).unwrap();
        for (k, &t) in tokens.iter().enumerate() {
            assert_eq!(batch.row(k), table.weights.row(t));
            assert_eq!(embed(&[t], &table).unwrap().row(0), table.weights.row(t));
        }
        assert!(matches!(
            embed(&[7], &table),
            Err(Error::TokenIndex { index: 7, size: 7 })
        ));
    }

    #[test]
    fn forward_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = tiny_config();
        let mut lm = LanguageModel::init(&cfg, 11, &mut rng).unwrap();
        for ad in lm.lora.adapters.values_mut() {
            ad.b = random_input(&mut rng, ad.b.nrows(), ad.b.ncols());
        }
        let x = random_input(&mut rng, 9, 8);
        let base = forward_logits(&lm, &x).unwrap();
        for j in 0..9 {
            let mut y = x.clone();
            y.row_mut(j).mapv_inplace(|v| v + 1.5);
            let out = forward_logits(&lm, &y).unwrap();
            for pos in 0..j {
                assert_eq!(out.row(pos), base.row(pos), "mutating row {j} changed position {pos}");
            }
            assert_ne!(out.row(j), base.row(j));
        }
    }

    #[test]
    fn zero_b_matches_adapter_free_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = tiny_config();
        let lm = LanguageModel::init(&cfg, 10, &mut rng).unwrap();
        let bare = LanguageModel::new(lm.decoder.clone(), LoraSet::empty());
        let x = random_input(&mut rng, 6, 8);
        assert_eq!(forward_logits(&lm, &x).unwrap(), forward_logits(&bare, &x).unwrap());
    }

    #[test]
    fn too_long_sequence_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lm = LanguageModel::init(&tiny_config(), 5, &mut rng).unwrap();
        let x = Array2::zeros((13, 8));
        assert!(matches!(
            forward_logits(&lm, &x),
            Err(Error::SequenceTooLong { len: 13, max: 12 })
        ));
    }

    #[test]
    fn lora_set_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = DecoderConfig {
            d_emb: 16,
            ..DecoderConfig::default()
        };
        let lora = LoraSet::init(&cfg, &mut rng);
        let params = lora_trainable(&lora);
        assert_eq!(params.len(), 8);
        assert!(params.iter().all(|(n, _)| n.starts_with("lora/")));
        assert!(lora.adapters.values().all(|a| a.b.iter().all(|&x| x == 0.0)));
        assert!(lora_trainable(&LoraSet::empty()).is_empty());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let lm = LanguageModel::init(&tiny_config(), 9, &mut rng).unwrap();
        let logits = forward_logits(&lm, &random_input(&mut rng, 7, 8)).unwrap();
        for row in logits.outer_iter() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let total: f64 = row.iter().map(|v| (v - max).exp() / z).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn initialization_is_deterministic() {
        let cfg = tiny_config();
        let a = LanguageModel::init(&cfg, 9, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = LanguageModel::init(&cfg, 9, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        let x = Array2::from_elem((4, 8), 0.25);
        assert_eq!(forward_logits(&a, &x).unwrap(), forward_logits(&b, &x).unwrap());
    }

    #[test]
    fn base_weights_are_not_tracked_when_frozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let lm = LanguageModel::init(&tiny_config(), 9, &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = lm.bind(&mut tape, &|n| n.starts_with("lora/"));
        assert_eq!(vars.trainable.len(), 8);
        assert!(vars.trainable.iter().all(|(n, _)| n.starts_with("lora/")));
        let x = tape.constant(random_input(&mut rng, 3, 8));
        let h = lm.hidden_on_tape(&mut tape, &vars, x).unwrap();
        let logits = lm.logits_on_tape(&mut tape, &vars, h);
        let root = tape.log_softmax_pick(logits, &[(2, 1)]);
        let grads = tape.backward(root);
        assert!(grads.get(vars.embed).is_none());
        assert!(grads.get(vars.blocks[0].wq).is_none());
        assert!(grads.get(vars.blocks[1].wv).is_none());
        assert_eq!(lm.forward_calls(), 1);
    }
}
