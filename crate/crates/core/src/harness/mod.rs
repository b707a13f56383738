//! Joint training, evaluation, ablation runs and checkpoints.

mod ablation;
mod checkpoint;
mod config;
mod model;
mod train;

pub use ablation::{run_ablation, run_single_view, sweep, MetricSpread, RunRecord, Spread, SweepReport};
pub use checkpoint::{Checkpoint, RngState};
pub use config::{Answers, Mode, TrainConfig};
pub use model::{load_template, FraudModel, GraphContext, MlpHead, NodeScore};
pub use train::{evaluate, evaluate_nodes, train, EpochRecord};
