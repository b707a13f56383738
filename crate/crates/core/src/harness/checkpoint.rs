//! Checkpoint directories: `index.json` with metadata and the tensor
//! table, `vocab.json` with the token list, and one raw little-endian `f64`
//! file per tensor under `tensors/`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Mode, TrainConfig};
use super::model::{FraudModel, MlpHead};
use super::train::EpochRecord;
use crate::backbone::{LanguageModel, Vocabulary};
use crate::encoder::SageParams;
use crate::error::{Error, Result};
use crate::prompt::PromptTemplate;
use crate::relgraph::SplitMasks;

const FORMAT: u32 = 1;

/// Position of the training RNG stream after the run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// ChaCha word position, as a decimal string (it is a `u128`).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad RNG position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: FraudModel,
    pub splits: SplitMasks,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub rng: RngState,
    /// Manifest of the training data, if it came from files.
    pub dataset: Option<PathBuf>,
    pub feature_dim: usize,
    pub relation_count: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Index {
    format: u32,
    config: TrainConfig,
    template: PromptTemplate,
    feature_dim: usize,
    relation_count: usize,
    splits: SplitMasks,
    history: Vec<EpochRecord>,
    best_epoch: Option<usize>,
    rng: RngState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dataset: Option<PathBuf>,
    tensors: Vec<TensorEntry>,
}

fn tensor_file(name: &str) -> String {
    format!("tensors/{}.bin", name.replace('/', "."))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tensor_dir = dir.join("tensors");
        fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;
        let mut tensors = Vec::new();
        for (name, t) in self.model.named() {
            let file = tensor_file(&name);
            let bytes: Vec<u8> = t.iter().flat_map(|v| v.to_le_bytes()).collect();
            let path = dir.join(&file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            tensors.push(TensorEntry {
                name,
                file,
                rows: t.nrows(),
                cols: t.ncols(),
            });
        }
        write_json(&dir.join("vocab.json"), &self.model.vocab.tokens())?;
        let index = Index {
            format: FORMAT,
            config: self.model.config.clone(),
            template: self.model.template.clone(),
            feature_dim: self.feature_dim,
            relation_count: self.relation_count,
            splits: self.splits.clone(),
            history: self.history.clone(),
            best_epoch: self.best_epoch,
            rng: self.rng.clone(),
            dataset: self.dataset.clone(),
            tensors,
        };
        write_json(&dir.join("index.json"), &index)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: Index = read_json(&dir.join("index.json"))?;
        if index.format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format {}", index.format)));
        }
        let tokens: Vec<String> = read_json(&dir.join("vocab.json"))?;
        let vocab = Vocabulary::from_token_list(tokens)?;
        let config = index.config;

        // Shapes come from a throwaway initialization; every value is then
        // overwritten from the tensor files.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc_cfg = config.encoder_config();
        let encoder = SageParams::init(&enc_cfg, index.feature_dim, index.relation_count, &mut rng);
        let lm = LanguageModel::init(&config.decoder, vocab.len(), &mut rng)?;
        let head = (config.mode == Mode::WoLlm)
            .then(|| MlpHead::init(index.relation_count * enc_cfg.output_dim(), config.mlp_hidden, &mut rng));
        let mut model = FraudModel::from_parts(config, index.template, vocab, encoder, lm, head)?;

        let mut filled = 0;
        let expected = model.named().len();
        for (name, slot) in model.named_mut() {
            let entry = index
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` missing")))?;
            if (entry.rows, entry.cols) != slot.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` is {}x{}, expected {:?}",
                    entry.rows,
                    entry.cols,
                    slot.dim()
                )));
            }
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() != entry.rows * entry.cols * 8 {
                return Err(Error::Checkpoint(format!(
                    "{} has {} bytes",
                    path.display(),
                    bytes.len()
                )));
            }
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            *slot = Array2::from_shape_vec((entry.rows, entry.cols), values)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            filled += 1;
        }
        if filled != expected || index.tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "index lists {} tensors, model has {expected}",
                index.tensors.len()
            )));
        }
        Ok(Self {
            model,
            splits: index.splits,
            history: index.history,
            best_epoch: index.best_epoch,
            rng: index.rng,
            dataset: index.dataset,
            feature_dim: index.feature_dim,
            relation_count: index.relation_count,
        })
    }
}
