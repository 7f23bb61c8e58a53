use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use evicon_core::curation::{ClusterCount, CurationConfig, PcaScope};
use evicon_core::distinguishability::ScoreWeights;
use evicon_core::embedding::EmbeddingConfig;
use evicon_core::predictor::{HeadReport, PredictorConfig};
use evicon_service::pipeline::{self, EvalSection};
use evicon_service::{App, Engine, EngineConfig, Store};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "evicon", version, about = "Perceptual usability engine for icon sets")]
struct Cli {
    /// Print machine-readable JSON instead of tables.
    #[arg(long, global = true)]
    json: bool,
    /// Directory holding icons, ratings, splits and checkpoints.
    #[arg(long, global = true, env = "EVICON_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic icons, crowd submissions and validated ratings.
    Syngen(SyngenArgs),
    /// Deduplicate, cluster and sample representative icons per tag.
    Curate(CurateArgs),
    /// Train the joint image/tag embedding on the non-held-out icons.
    TrainEmbedding(EmbeddingArgs),
    /// Train the usability predictor on seen tags.
    TrainPredictor(PredictorArgs),
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Score every icon of a set and mark the best one.
    Score(ScoreArgs),
    /// Run the HTTP feedback service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct SyngenArgs {
    #[arg(long, default_value_t = 10)]
    tags: usize,
    #[arg(long, default_value_t = 60)]
    per_tag: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    workers: usize,
    #[arg(long, default_value_t = 0.1)]
    spam_fraction: f64,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    /// Output directory; defaults to the data directory.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    PerTag,
    Global,
}

#[derive(Args)]
struct CurateArgs {
    /// Icon JSON-lines file; defaults to the data directory's icons.
    #[arg(long)]
    icons: Option<PathBuf>,
    #[arg(long, default_value_t = 0.9)]
    variance: f64,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Pick k by the elbow rule in [2, k] instead of using k directly.
    #[arg(long)]
    elbow: bool,
    #[arg(long, default_value_t = 20)]
    per_cluster: usize,
    #[arg(long, value_enum, default_value_t = Scope::PerTag)]
    scope: Scope,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Manifest path; defaults to manifest.json in the data directory.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EmbeddingArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PredictorArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Probability of training on a coordinate-permuted copy of an example.
    #[arg(long)]
    pair_augment: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// MAP@k among the held-out icons.
    Retrieval {
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Precision/recall on training, in-domain and unseen-tag records.
    Predictor,
}

#[derive(Args)]
struct ScoreArgs {
    /// Icon set: JSON array, {"icons": [...]}, or JSON-lines.
    #[arg(long)]
    set: PathBuf,
    #[arg(long, default_value = "0.3333333333333333,0.3333333333333333,0.3333333333333333")]
    weights: ScoreWeights,
}

#[derive(Args)]
struct ServeArgs {
    /// JSON engine config; unset fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    port: Option<u16>,
}

fn emit<T: Serialize>(json: bool, value: &T, table: impl FnOnce()) -> anyhow::Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(value)?);
    } else {
        table();
    }
    Ok(())
}

fn print_heads(name: &str, s: &EvalSection) {
    println!("{name} ({} records)", s.examples);
    let heads: &[HeadReport] = &s.heads;
    for (h, base) in heads.iter().zip(s.majority_baseline) {
        println!(
            "  {:<4} accuracy {:.3}  majority {:.3}  precision {:.3}  recall {:.3}",
            serde_json::to_value(h.head).unwrap().as_str().unwrap_or(""),
            h.accuracy,
            base,
            h.macro_precision,
            h.macro_recall
        );
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let dir = cli.data_dir.clone();
    match cli.command {
        Command::Syngen(a) => {
            let out = a.out.unwrap_or(dir);
            let summary = pipeline::syngen(
                &out,
                &pipeline::SyngenOptions {
                    tags: a.tags,
                    per_tag: a.per_tag,
                    seed: a.seed,
                    workers: a.workers,
                    spam_fraction: a.spam_fraction,
                    noise: a.noise,
                },
            )?;
            emit(cli.json, &summary, || {
                println!("icons        {}", summary.icons);
                println!("submissions  {}", summary.submissions);
                println!("spam planted {}  rejected {} ({} spam)", summary.planted_spam, summary.rejected, summary.rejected_spam);
                println!("records      {}  -> {}", summary.records, out.join(pipeline::RATINGS).display());
            })
        }
        Command::Curate(a) => {
            let config = CurationConfig {
                variance_target: a.variance,
                clusters: if a.elbow {
                    ClusterCount::Elbow { k_min: 2, k_max: a.k }
                } else {
                    ClusterCount::Fixed(a.k)
                },
                per_cluster: a.per_cluster,
                scope: match a.scope {
                    Scope::PerTag => PcaScope::PerTag,
                    Scope::Global => PcaScope::Global,
                },
                seed: a.seed,
                ..Default::default()
            };
            let icons = a.icons.unwrap_or_else(|| dir.join(pipeline::ICONS));
            let manifest = pipeline::curate(&icons, &config)?;
            let output = a.output.unwrap_or_else(|| dir.join(pipeline::MANIFEST));
            std::fs::write(&output, serde_json::to_string_pretty(&manifest)? + "\n")
                .with_context(|| format!("writing {}", output.display()))?;
            emit(cli.json, &manifest, || {
                println!("{:<16} {:>6} {:>6} {:>4} {:>8}", "group", "icons", "unique", "k", "selected");
                for g in &manifest.groups {
                    println!("{:<16} {:>6} {:>6} {:>4} {:>8}", g.group, g.icons, g.unique, g.k, g.selected);
                }
                println!("{} icons selected -> {}", manifest.selected.len(), output.display());
            })
        }
        Command::TrainEmbedding(a) => {
            let d = EmbeddingConfig::default();
            let config = EmbeddingConfig {
                epochs: a.epochs.unwrap_or(d.epochs),
                dim: a.dim.unwrap_or(d.dim),
                batch: a.batch.unwrap_or(d.batch),
                lr: a.lr.unwrap_or(d.lr),
                seed: a.seed.unwrap_or(d.seed),
                ..d
            };
            let outcome = pipeline::train_embedding(&dir, &config)?;
            emit(cli.json, &outcome, || {
                for (i, l) in outcome.report.loss_history.iter().enumerate() {
                    println!("epoch {:>3}  loss {l:.4}", i + 1);
                }
                println!("{} pairs, {:.1}s", outcome.train_pairs, outcome.seconds);
            })
        }
        Command::TrainPredictor(a) => {
            let d = PredictorConfig::default();
            let config = PredictorConfig {
                epochs: a.epochs.unwrap_or(d.epochs),
                hidden: a.hidden.unwrap_or(d.hidden),
                batch: a.batch.unwrap_or(d.batch),
                lr: a.lr.unwrap_or(d.lr),
                weight_decay: a.weight_decay.unwrap_or(d.weight_decay),
                pair_augment: a.pair_augment.unwrap_or(d.pair_augment),
                seed: a.seed.unwrap_or(d.seed),
                ..d
            };
            let outcome = pipeline::train_predictor(&dir, &config)?;
            emit(cli.json, &outcome, || {
                let h = &outcome.report.loss_history;
                println!("{} examples, {:.1}s", outcome.train_examples, outcome.seconds);
                if let (Some(first), Some(last)) = (h.first(), h.last()) {
                    println!("loss {first:.4} -> {last:.4} over {} epochs", h.len());
                }
                for w in &outcome.report.warnings {
                    println!("warning: {w}");
                }
            })
        }
        Command::Eval(EvalCommand::Retrieval { k }) => {
            let report = pipeline::eval_retrieval(&dir, k)?;
            emit(cli.json, &report, || {
                println!("MAP@{} = {:.4} over {} queries ({} skipped)", report.k, report.map_at_k, report.queries, report.skipped);
            })
        }
        Command::Eval(EvalCommand::Predictor) => {
            let report = pipeline::eval_predictor(&dir)?;
            emit(cli.json, &report, || {
                print_heads("train", &report.train);
                print_heads("in-domain", &report.in_domain);
                print_heads(&format!("unseen tags {:?}", report.unseen_tags), &report.out_of_domain);
            })
        }
        Command::Score(a) => {
            let set = pipeline::load_icon_set(&a.set)?;
            let config = pipeline::engine_config(&dir);
            let rows = pipeline::score(&config, &set, a.weights)?;
            emit(cli.json, &rows, || {
                println!("{:<20} {:>7} {:>7} {:>7} {:>7}", "icon", "phi_sd", "phi_fam", "phi_vd", "score");
                for r in &rows {
                    println!(
                        "{:<20} {:>7.4} {:>7.4} {:>7.4} {:>7.4}{}",
                        r.id,
                        r.score.phi_sd,
                        r.score.phi_fam,
                        r.score.phi_vd,
                        r.score.score,
                        if r.best { "  *" } else { "" }
                    );
                }
            })
        }
        Command::Serve(a) => {
            let mut config = match &a.config {
                Some(p) => EngineConfig::from_file(p)?,
                None => pipeline::engine_config(&dir),
            }
            .apply_env()?;
            if let Some(p) = a.port {
                config.port = p;
            }
            let engine = Engine::load(&config).context("loading models")?;
            let store = Store::open(&config.data_dir)?;
            let app = Arc::new(App::new(Arc::new(engine), store));
            tokio::runtime::Runtime::new()?.block_on(evicon_service::http::serve(app, config.port))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
