use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use relprompt_core::dataio::{load_manifest_dataset, synth_fraud_graph, write_dataset, SynthSpec};
use relprompt_core::harness::{evaluate_nodes, sweep, train, Checkpoint, GraphContext, Mode, NodeScore, TrainConfig};
use relprompt_core::relgraph::{stratified_split, SplitName};

#[derive(Parser)]
#[command(name = "relprompt", version, about = "Graph soft-prompt fraud detection")]
struct Cli {
    /// Log progress (per-epoch loss and validation AUC).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-fraud dataset from a JSON spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and save its best checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's mode, e.g. `wo_joint` or `single_view:1`.
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on one of its splits.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Write the report here as JSON (it is always printed).
        #[arg(long)]
        json: Option<PathBuf>,
        /// Dataset manifest; defaults to the one recorded at training time.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Dump per-node scores as CSV: node,label,score,prediction.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Train and test several modes over the config's seeds.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "full,wo_llm,wo_semantics,wo_joint")]
        modes: Vec<Mode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Single-relation prompts; every view when `--view` is omitted.
    SingleView {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// 0-based relation index; may be repeated.
        #[arg(long)]
        view: Vec<usize>,
        /// Also run the full multi-view prompt for comparison.
        #[arg(long)]
        with_full: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => Ok(TrainConfig::from_path(p)?),
        None => Ok(TrainConfig::default()),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_scores(path: &Path, scores: &[NodeScore]) -> Result<()> {
    let mut out = String::from("node,label,score,prediction\n");
    for s in scores {
        out.push_str(&format!(
            "{},{},{:e},{}\n",
            s.node,
            s.label.code(),
            s.score,
            s.prediction.code()
        ));
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out } => {
            let text = fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec: SynthSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", spec.display()))?;
            let (graph, _) = synth_fraud_graph(&spec)?;
            let path = write_dataset(&graph, "synthetic", &out)?;
            println!("{}", path.display());
        }
        Command::Train {
            manifest,
            config,
            out,
            mode,
            seed,
        } => {
            let mut config = load_config(config.as_deref())?;
            if let Some(m) = mode {
                config.mode = m;
            }
            if let Some(s) = seed {
                config = config.with_seed(s);
            }
            let (_, graph) = load_manifest_dataset(&manifest)?;
            let splits = stratified_split(&graph, config.split, config.split_seed())?;
            let mut ckpt = train(&graph, &splits, &config)?;
            ckpt.dataset = Some(fs::canonicalize(&manifest)?);
            ckpt.save(&out)?;
            if let Some(best) = ckpt.best_epoch.and_then(|e| ckpt.history.get(e)) {
                println!("best epoch {} (val auc {:.4})", best.epoch, best.val_auc);
            }
            println!("{}", out.display());
        }
        Command::Eval {
            ckpt,
            split,
            json,
            manifest,
            scores,
        } => {
            let which: SplitName = split.parse()?;
            let checkpoint = Checkpoint::load(&ckpt)?;
            let manifest = match manifest.or_else(|| checkpoint.dataset.clone()) {
                Some(m) => m,
                None => bail!("checkpoint records no dataset; pass --manifest"),
            };
            let (_, graph) = load_manifest_dataset(&manifest)?;
            checkpoint.splits.validate(&graph)?;
            let ctx = GraphContext::new(&graph);
            let nodes = checkpoint.splits.get(which);
            let (report, node_scores) = evaluate_nodes(&checkpoint.model, &graph, &ctx, nodes)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(path) = json {
                write_json(&path, &report)?;
            }
            if let Some(path) = scores {
                write_scores(&path, &node_scores)?;
            }
        }
        Command::Ablate {
            manifest,
            config,
            modes,
            out,
        } => {
            let config = load_config(config.as_deref())?;
            let (_, graph) = load_manifest_dataset(&manifest)?;
            let report = sweep(&graph, &config, &modes)?;
            let path = out.join("ablation.json");
            write_json(&path, &report)?;
            println!("{}", serde_json::to_string_pretty(&report.summary)?);
        }
        Command::SingleView {
            manifest,
            config,
            view,
            with_full,
            out,
        } => {
            let config = load_config(config.as_deref())?;
            let (_, graph) = load_manifest_dataset(&manifest)?;
            let views = if view.is_empty() {
                (0..graph.relation_count()).collect()
            } else {
                view
            };
            if let Some(&bad) = views.iter().find(|&&j| j >= graph.relation_count()) {
                bail!("view {bad} out of range for {} relations", graph.relation_count());
            }
            let mut modes: Vec<Mode> = views.into_iter().map(Mode::SingleView).collect();
            if with_full {
                modes.push(Mode::Full);
            }
            let report = sweep(&graph, &config, &modes)?;
            write_json(&out.join("single_view.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report.summary)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
