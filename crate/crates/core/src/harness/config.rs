use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::relgraph::SplitRatios;

/// Pipeline variant. `SingleView(j)` uses a 0-based relation index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Mode {
    Full,
    WoLlm,
    WoSemantics,
    WoJoint,
    Flattened,
    SingleView(usize),
}

impl Mode {
    pub fn uses_lm(self) -> bool {
        self != Mode::WoLlm
    }

    pub fn uses_encoder(self) -> bool {
        self != Mode::Flattened
    }

    /// Whether the parameter called `name` is optimized in this mode.
    pub fn trains(self, name: &str) -> bool {
        let sage = name.starts_with("sage/");
        let lora = name.starts_with("lora/");
        let mlp = name.starts_with("mlp/");
        match self {
            Mode::Full | Mode::WoSemantics => sage || lora,
            Mode::SingleView(j) => lora || name.starts_with(&format!("sage/{j}/")),
            Mode::WoJoint | Mode::Flattened => lora,
            Mode::WoLlm => sage || mlp,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Full => f.write_str("full"),
            Mode::WoLlm => f.write_str("wo_llm"),
            Mode::WoSemantics => f.write_str("wo_semantics"),
            Mode::WoJoint => f.write_str("wo_joint"),
            Mode::Flattened => f.write_str("flattened"),
            Mode::SingleView(j) => write!(f, "single_view:{j}"),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(Mode::Full),
            "wo_llm" => Ok(Mode::WoLlm),
            "wo_semantics" => Ok(Mode::WoSemantics),
            "wo_joint" => Ok(Mode::WoJoint),
            "flattened" => Ok(Mode::Flattened),
            other => other
                .strip_prefix("single_view:")
                .and_then(|j| j.parse().ok())
                .map(Mode::SingleView)
                .ok_or_else(|| Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

impl TryFrom<String> for Mode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Mode> for String {
    fn from(m: Mode) -> String {
        m.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answers {
    pub fraud: String,
    pub normal: String,
}

impl Default for Answers {
    fn default() -> Self {
        Self {
            fraud: "fraud".into(),
            normal: "normal".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    /// Stop after this many epochs without a validation AUC improvement;
    /// 0 disables early stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Seeds for sweeps; empty means just `seed`.
    pub seeds: Vec<u64>,
    /// Seed of the data split; defaults to `seed`.
    pub split_seed: Option<u64>,
    pub split: SplitRatios,
    pub adam: AdamConfig,
    /// Encoder layer widths; the default is two layers of `decoder.d_emb`.
    pub encoder: Option<EncoderConfig>,
    pub decoder: DecoderConfig,
    /// Built-in template name or a path to a template JSON file.
    pub template: String,
    pub answers: Answers,
    /// Rescale injected vectors to the mean row norm of the embedding table.
    pub inject_scale_norm: bool,
    /// Decimal digits in flattened prompts.
    pub flatten_digits: usize,
    /// Hidden width of the classifier head used without the language model.
    pub mlp_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            epochs: 30,
            patience: 5,
            batch_size: 8,
            seed: 0,
            seeds: Vec::new(),
            split_seed: None,
            split: SplitRatios::default(),
            adam: AdamConfig::default(),
            encoder: None,
            decoder: DecoderConfig::default(),
            template: "generic".into(),
            answers: Answers::default(),
            inject_scale_norm: false,
            flatten_digits: 2,
            mlp_hidden: 64,
        }
    }
}

impl TrainConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        self.encoder
            .clone()
            .unwrap_or_else(|| EncoderConfig::with_width(self.decoder.d_emb))
    }

    pub fn split_seed(&self) -> u64 {
        self.split_seed.unwrap_or(self.seed)
    }

    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        Self { mode, ..self.clone() }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            split_seed: Some(self.split_seed()),
            ..self.clone()
        }
    }

    /// Checks everything that does not depend on the graph.
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.decoder.validate()?;
        self.encoder_config().validate(self.decoder.d_emb)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.mode == Mode::WoLlm && self.mlp_hidden == 0 {
            return Err(Error::Config("mlp_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn validate_for(&self, relation_count: usize) -> Result<()> {
        self.validate()?;
        if let Mode::SingleView(j) = self.mode {
            if j >= relation_count {
                return Err(Error::Config(format!(
                    "single view {j} out of range for {relation_count} relations"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_strings_round_trip() {
        for m in [
            Mode::Full,
            Mode::WoLlm,
            Mode::WoSemantics,
            Mode::WoJoint,
            Mode::Flattened,
            Mode::SingleView(2),
        ] {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("single_view:x".parse::<Mode>().is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c: TrainConfig = serde_json::from_str(r#"{"mode": "wo_joint", "epochs": 3}"#).unwrap();
        assert_eq!(c.mode, Mode::WoJoint);
        assert_eq!(c.epochs, 3);
        assert_eq!(c.adam.learning_rate, 3e-4);
        assert_eq!(c.batch_size, 8);
        c.validate().unwrap();
    }

    #[test]
    fn trainable_sets() {
        assert!(Mode::Full.trains("sage/0/1") && Mode::Full.trains("lora/block0.q/A"));
        assert!(!Mode::Full.trains("lm/embed"));
        assert!(!Mode::WoJoint.trains("sage/0/0"));
        assert!(Mode::WoLlm.trains("mlp/w1") && !Mode::WoLlm.trains("lora/block0.v/B"));
        assert!(Mode::SingleView(1).trains("sage/1/0") && !Mode::SingleView(1).trains("sage/0/0"));
    }

    #[test]
    fn single_view_index_checked() {
        let c = TrainConfig::default().with_mode(Mode::SingleView(3));
        assert!(c.validate_for(3).is_err());
        c.validate_for(4).unwrap();
    }
}
