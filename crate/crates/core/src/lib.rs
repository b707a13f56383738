//! Graph-structure prompting for fraud detection on multi-relational graphs.
//!
//! Per-relation GraphSAGE encoders produce one vector per node and relation.
//! Those vectors replace special-token rows in the embedded prompt of a small
//! causal language model, and the encoders and the model's low-rank adapters
//! are trained together on the log-likelihood of the answer words "fraud"
//! and "normal".

pub mod backbone;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod objective;
pub mod optim;
pub mod prompt;
pub mod relgraph;
pub mod tape;

pub use backbone::{DecoderConfig, LanguageModel, Vocabulary};
pub use dataio::{load_dataset, synth_fraud_graph, DatasetManifest, SynthSpec};
pub use encoder::{EncoderConfig, RelationEmbeddings, SageParams};
pub use error::{Error, Result};
pub use harness::{evaluate, train, Checkpoint, FraudModel, Mode, TrainConfig};
pub use objective::EvalReport;
pub use relgraph::{stratified_split, Label, Relation, RelationalGraph, SplitMasks, SplitName, SplitRatios};
