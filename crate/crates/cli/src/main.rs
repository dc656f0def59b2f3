//! Command-line surface: synthetic data generation, training, evaluation,
//! inference, attention inspection and gradient verification.
//!
//! Errors leave with a nonzero exit code and a machine-readable JSON object
//! on stderr.

use clap::{Parser, Subcommand};
use scenegraph_core::checkpoint::{load_checkpoint, save_checkpoint};
use scenegraph_core::config::Config;
use scenegraph_core::data::{load_dataset, save_dataset, Vocab};
use scenegraph_core::eval::{evaluate, rank_triplets_capped, RankMode, Task};
use scenegraph_core::model::{attention_report, joint_loss, predict, ModelParams, PairSample};
use scenegraph_core::semantic::EmbeddingTable;
use scenegraph_core::synthetic::gen_synthetic;
use scenegraph_core::tensor::grad_check;
use scenegraph_core::train::train;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "scenegraph",
    about = "Scene graph generation: train, evaluate and inspect relation models",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus the loss curve.
    Train {
        /// Line-delimited JSON dataset.
        #[arg(long)]
        data: PathBuf,
        /// Config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
        /// Vocabulary file; falls back to a sidecar next to the dataset,
        /// then to generic names sized from the config.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Evaluate a checkpoint under SGCls or PredCls.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// sgcls or predcls.
        #[arg(long)]
        task: Task,
        /// Print the unconstrained recalls as the headline numbers.
        #[arg(long)]
        unconstrained: bool,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Write the full evaluation result as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Emit per-image scene graphs as ranked triplet lists.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Output file, one JSON object per image.
        #[arg(long = "out-graphs")]
        out_graphs: PathBuf,
        /// sgcls (predicted labels) or predcls (ground-truth labels).
        #[arg(long, default_value = "sgcls")]
        task: Task,
        /// Keep only the top K triplets per image.
        #[arg(long)]
        top_k: Option<usize>,
        /// Rank all non-bg predicates per pair instead of the best one.
        #[arg(long)]
        unconstrained: bool,
        /// Cap predicates per pair in unconstrained mode.
        #[arg(long)]
        pair_cap: Option<usize>,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Generate a synthetic dataset and its vocabulary sidecar.
    GenSynthetic {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Vocabulary output; defaults to the dataset path with a
        /// .vocab.json extension.
        #[arg(long)]
        vocab_out: Option<PathBuf>,
    },
    /// Verify tape gradients against finite differences.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Dump adjacency matrices and attention coefficients per image.
    DumpAttention {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
}

#[derive(Debug)]
struct CliError {
    kind: &'static str,
    message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl Into<String>) -> CliError {
        CliError {
            kind,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

macro_rules! from_error {
    ($ty:ty, $kind:expr) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> CliError {
                CliError::new($kind, e.to_string())
            }
        }
    };
}

from_error!(scenegraph_core::data::DataError, "data");
from_error!(scenegraph_core::model::ModelError, "model");
from_error!(scenegraph_core::config::ConfigError, "config");
from_error!(std::io::Error, "io");
from_error!(serde_json::Error, "encoding");

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        let payload = serde_json::json!({ "error": e.message, "kind": e.kind });
        eprintln!("{payload}");
        std::process::exit(1);
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<Config, CliError> {
    match path {
        Some(p) => Ok(Config::load(p)?),
        None => Ok(Config::default()),
    }
}

/// Explicit path, then the dataset sidecar, then generic names.
fn resolve_vocab(
    vocab: &Option<PathBuf>,
    data: &Path,
    entity_classes: usize,
    predicate_classes: usize,
) -> Result<Vocab, CliError> {
    if let Some(p) = vocab {
        return Ok(Vocab::load(p)?);
    }
    let sidecar = data.with_extension("vocab.json");
    if sidecar.exists() {
        return Ok(Vocab::load(&sidecar)?);
    }
    Ok(generic_vocab(entity_classes, predicate_classes))
}

fn generic_vocab(entity_classes: usize, predicate_classes: usize) -> Vocab {
    let entities = (0..entity_classes).map(|c| format!("class_{c}")).collect();
    let mut predicates = vec!["bg".to_string()];
    predicates.extend((1..predicate_classes).map(|p| format!("pred_{p}")));
    Vocab {
        entities,
        predicates,
    }
}

fn init_params(cfg: &Config) -> Result<ModelParams, CliError> {
    match &cfg.model.embeddings_path {
        Some(path) => {
            let vocab = generic_vocab(cfg.model.entity_classes, cfg.model.predicate_classes);
            let table = EmbeddingTable::load(path, &vocab, cfg.model.embed_dim)?;
            Ok(ModelParams::init_with_table(
                &cfg.model,
                cfg.train.seed,
                table,
            )?)
        }
        None => Ok(ModelParams::init(&cfg.model, cfg.train.seed)),
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenSynthetic {
            config,
            out,
            vocab_out,
        } => {
            let cfg = load_config(&config)?;
            let (data, vocab) = gen_synthetic(&cfg.synthetic)?;
            save_dataset(&out, &data)?;
            let vocab_path = vocab_out.unwrap_or_else(|| out.with_extension("vocab.json"));
            vocab.save(&vocab_path)?;
            println!(
                "wrote {} images to {} (vocab: {})",
                data.len(),
                out.display(),
                vocab_path.display()
            );
            Ok(())
        }

        Command::Train {
            data,
            config,
            out,
            vocab,
        } => {
            let cfg = load_config(&config)?;
            let vocab = resolve_vocab(
                &vocab,
                &data,
                cfg.model.entity_classes,
                cfg.model.predicate_classes,
            )?;
            let dataset = load_dataset(&data, &vocab)?;
            if dataset.is_empty() {
                return Err(CliError::new("data", "dataset is empty"));
            }
            std::fs::create_dir_all(&out)?;
            let params = init_params(&cfg)?;

            let ckpt_every = cfg.train.checkpoint_every;
            let out_dir = out.clone();
            let mut prev_steps = 0usize;
            let result = train(&dataset, params, &cfg.train, |epoch, params, steps| {
                let slice = &steps[prev_steps..];
                let epoch_loss = slice.iter().sum::<f64>() / slice.len().max(1) as f64;
                prev_steps = steps.len();
                println!(
                    "epoch {epoch}: {} steps, mean loss {epoch_loss:.6}",
                    steps.len()
                );
                if ckpt_every > 0 && (epoch + 1) % ckpt_every == 0 {
                    save_checkpoint(&out_dir.join(format!("ckpt_epoch_{epoch}.json")), params)?;
                }
                Ok(())
            })?;

            save_checkpoint(&out.join("ckpt_final.json"), &result.params)?;
            let curve = serde_json::json!({
                "step_losses": result.step_losses,
                "epoch_losses": result.epoch_losses,
            });
            std::fs::write(
                out.join("loss_curve.json"),
                serde_json::to_string_pretty(&curve)?,
            )?;
            std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
            println!(
                "final checkpoint: {}",
                out.join("ckpt_final.json").display()
            );
            Ok(())
        }

        Command::Eval {
            data,
            ckpt,
            task,
            unconstrained,
            vocab,
            report,
        } => {
            let params = load_checkpoint(&ckpt)?;
            let vocab = resolve_vocab(
                &vocab,
                &data,
                params.config.entity_classes,
                params.config.predicate_classes,
            )?;
            let dataset = load_dataset(&data, &vocab)?;
            let result = evaluate(&dataset, &params, task, &vocab.predicates)?;
            let (r50, r100, label) = if unconstrained {
                (
                    result.unconstrained_recall_50,
                    result.unconstrained_recall_100,
                    "unconstrained",
                )
            } else {
                (
                    result.constrained_recall_50,
                    result.constrained_recall_100,
                    "constrained",
                )
            };
            println!(
                "{:?} {label}: Recall@50 {:.4}  Recall@100 {:.4}  ({} images, {} skipped)",
                result.task, r50, r100, result.image_count, result.skipped_images
            );
            for (name, recall) in &result.per_predicate_recall_5 {
                println!("  recall@5[{name}] = {recall:.4}");
            }
            if let Some(path) = report {
                std::fs::write(&path, serde_json::to_string_pretty(&result)?)?;
                println!("report: {}", path.display());
            }
            Ok(())
        }

        Command::Infer {
            data,
            ckpt,
            out_graphs,
            task,
            top_k,
            unconstrained,
            pair_cap,
            vocab,
        } => {
            let params = load_checkpoint(&ckpt)?;
            let vocab = resolve_vocab(
                &vocab,
                &data,
                params.config.entity_classes,
                params.config.predicate_classes,
            )?;
            let dataset = load_dataset(&data, &vocab)?;
            let mode = if unconstrained {
                RankMode::Unconstrained
            } else {
                RankMode::Constrained
            };
            let mut out = std::io::BufWriter::new(std::fs::File::create(&out_graphs)?);
            for instance in &dataset {
                let mut graph = predict(&params, instance)?;
                if task == Task::PredCls {
                    graph.entity_probs = instance
                        .entities
                        .iter()
                        .map(|e| {
                            let mut one_hot = vec![0.0; params.config.entity_classes];
                            one_hot[e.gt_label] = 1.0;
                            one_hot
                        })
                        .collect();
                }
                let mut triplets = rank_triplets_capped(&graph, mode, pair_cap);
                if let Some(k) = top_k {
                    triplets.truncate(k);
                }
                let rows: Vec<serde_json::Value> = triplets
                    .iter()
                    .map(|t| {
                        serde_json::json!({
                            "subject": t.subject,
                            "subject_label": vocab.entities[t.subject_label],
                            "predicate": vocab.predicates[t.predicate],
                            "object": t.object,
                            "object_label": vocab.entities[t.object_label],
                            "score": t.score,
                        })
                    })
                    .collect();
                let line = serde_json::json!({ "id": instance.id, "triplets": rows });
                writeln!(out, "{line}")?;
            }
            println!(
                "wrote graphs for {} images to {}",
                dataset.len(),
                out_graphs.display()
            );
            Ok(())
        }

        Command::DumpAttention {
            data,
            ckpt,
            out,
            vocab,
        } => {
            let params = load_checkpoint(&ckpt)?;
            let vocab = resolve_vocab(
                &vocab,
                &data,
                params.config.entity_classes,
                params.config.predicate_classes,
            )?;
            let dataset = load_dataset(&data, &vocab)?;
            let mut file = std::io::BufWriter::new(std::fs::File::create(&out)?);
            for instance in &dataset {
                let report = attention_report(&params, instance)?;
                writeln!(file, "{}", serde_json::to_string(&report)?)?;
            }
            println!(
                "wrote attention reports for {} images to {}",
                dataset.len(),
                out.display()
            );
            Ok(())
        }

        Command::GradCheck { config } => {
            // Finite differences evaluate the loss twice per parameter
            // entry, so without an explicit config a compact architecture
            // stands in for the full-size defaults.
            let cfg = match &config {
                Some(_) => load_config(&config)?,
                None => {
                    let mut cfg = Config::default();
                    cfg.model.entity_classes = 6;
                    cfg.model.predicate_classes = 4;
                    cfg.model.feature_dim = 16;
                    cfg.model.visual_proj_dim = 8;
                    cfg.model.embed_dim = 6;
                    cfg.model.semantic_dim = 4;
                    cfg.model.attention_dim = 8;
                    cfg.model.attention_heads = 2;
                    cfg.model.mlp_hidden = 8;
                    cfg
                }
            };
            // A three-entity instance with dimensions matched to the model.
            let mut syn = cfg.synthetic.clone();
            syn.n_images = 1;
            syn.entities_per_image = 3;
            syn.entity_classes = cfg.model.entity_classes;
            syn.predicate_classes = cfg
                .model
                .predicate_classes
                .min(1 + scenegraph_core::data::SPATIAL_RULE_NAMES.len());
            syn.feature_dim = cfg.model.feature_dim;
            let (data, _) = gen_synthetic(&syn)?;
            let instance = &data[0];
            let mut model_cfg = cfg.model.clone();
            model_cfg.predicate_classes = syn.predicate_classes;
            let params = init_params(&Config {
                model: model_cfg.clone(),
                ..cfg.clone()
            })?;
            let sample = PairSample::full(instance);
            let report = grad_check(
                &params.store,
                |bound, tape| joint_loss(tape, bound, &model_cfg, instance, &sample),
                1e-5,
                1e-4,
            )?;
            for (name, err) in &report.per_param {
                println!("  {name}: max rel err {err:.3e}");
            }
            println!("{}", report.summary());
            if !report.passed() {
                return Err(CliError::new("gradcheck", report.summary()));
            }
            Ok(())
        }
    }
}
