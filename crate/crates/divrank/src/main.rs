use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use divrank::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use divrank::config::ExperimentConfig;
use divrank::corpus_io::{load_corpus, save_corpus};
use divrank::error::io_err;
use divrank::export::pca_csv;
use divrank::pipeline::{ablate, evaluate, retrieve, train, worker_count, Axis};
use divrank::report::{ablation_csv, metrics_csv, read_run, write_run};
use divrank::{Error, Result};
use divrank_core::corpus::{generate_synthetic, Split};
use divrank_core::retrieval::Strategy;

#[derive(Parser)]
#[command(name = "divrank", version, about = "Diversity-aware re-ranking over embedding corpora")]
struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Workers for query-parallel stages (capped by DIVRANK_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Colt,
    Topk,
    Mmr,
    Dbscan,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-tailed corpus.
    Gen {
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long)]
        test_queries: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        mean_categories: Option<f64>,
        /// Manifest path (`name` or `name.manifest.jsonl`).
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train the re-encoder, then the token classifier.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Identity re-encoder (no contrastive stage).
        #[arg(long)]
        skip_scl: bool,
        /// No token classifier; only baseline strategies can use the checkpoint.
        #[arg(long)]
        skip_ttc: bool,
        /// Train the classifier without token augmentation.
        #[arg(long)]
        no_da: bool,
    },
    /// Produce one ranked list per query.
    Retrieve {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "colt")]
        strategy: StrategyArg,
        #[arg(short, long)]
        k: Option<usize>,
        /// Images taken per predicted category.
        #[arg(short = 'x', long)]
        per_category: Option<usize>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// JSON-lines run file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Score run files.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        run: Vec<PathBuf>,
        /// Metrics CSV; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Sweep one setting, retraining what it affects.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        /// X, L, N, pairs, da or scl.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// 2-D PCA of raw and re-encoded features.
    Export {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

/// Checkpoint config (if any), then the file, then `--set`, then flags.
fn effective_config(cli: &Cli, base: Option<&ExperimentConfig>) -> Result<ExperimentConfig> {
    let mut cfg = base.cloned().unwrap_or_default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        cfg.apply(&text)?;
    }
    for pair in &cli.set {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(path) => std::fs::write(path, text).map_err(io_err(path)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(io_err("<stdout>")),
    }
}

fn run(cli: &Cli) -> Result<()> {
    let threads = worker_count(cli.threads);
    match &cli.command {
        Command::Gen {
            queries,
            test_queries,
            dim,
            mean_categories,
            output,
        } => {
            let mut cfg = effective_config(cli, None)?;
            if let Some(v) = queries {
                cfg.queries = *v;
            }
            if let Some(v) = test_queries {
                cfg.test_queries = *v;
            }
            if let Some(v) = dim {
                cfg.dim = *v;
            }
            if let Some(v) = mean_categories {
                cfg.mean_categories = *v;
            }
            cfg.validate()?;
            let corpus = generate_synthetic(&cfg.generator(), cfg.seed)?;
            save_corpus(&corpus, output)
        }
        Command::Train {
            corpus,
            output,
            skip_scl,
            skip_ttc,
            no_da,
        } => {
            let mut cfg = effective_config(cli, None)?;
            cfg.skip_scl |= skip_scl;
            cfg.skip_ttc |= skip_ttc;
            if *no_da {
                cfg.augment = false;
            }
            let corpus = load_corpus(corpus)?;
            let ckpt = train(&corpus, &cfg)?;
            save_checkpoint(&ckpt, output)
        }
        Command::Retrieve {
            corpus,
            checkpoint,
            strategy,
            k,
            per_category,
            split,
            output,
        } => {
            let ckpt: Option<Checkpoint> = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let mut cfg = effective_config(cli, ckpt.as_ref().map(|c| &c.config))?;
            if let Some(v) = k {
                cfg.k = *v;
            }
            if let Some(v) = per_category {
                cfg.per_category = *v;
            }
            cfg.validate()?;
            let strategy = match strategy {
                StrategyArg::Colt => Strategy::Colt,
                StrategyArg::Topk => Strategy::TopK,
                StrategyArg::Mmr => Strategy::Mmr,
                StrategyArg::Dbscan => Strategy::Dbscan,
            };
            let split = match split {
                SplitArg::Train => Some(Split::Train),
                SplitArg::Test => Some(Split::Test),
                SplitArg::All => None,
            };
            let corpus = load_corpus(corpus)?;
            let lists = retrieve(&corpus, ckpt.as_ref(), strategy, &cfg, split, threads)?;
            match output {
                Some(path) => write_run(path, &cfg, &lists),
                None => emit(None, &divrank::report::run_to_string(&cfg, &lists)),
            }
        }
        Command::Eval { corpus, run, output } => {
            let cfg = effective_config(cli, None)?;
            cfg.validate()?;
            let corpus = load_corpus(corpus)?;
            let mut rows = Vec::new();
            for path in run {
                let lists = read_run(path)?;
                let strategy = lists
                    .first()
                    .map(|l| l.strategy)
                    .ok_or_else(|| Error::Config(format!("{} holds no lists", path.display())))?;
                if lists.iter().any(|l| l.strategy != strategy) {
                    return Err(Error::Config(format!("{} mixes strategies", path.display())));
                }
                rows.push((strategy, evaluate(&lists, &corpus, &cfg.ks)?));
            }
            emit(output.as_deref(), &metrics_csv(&cfg, &rows))
        }
        Command::Ablate {
            corpus,
            axis,
            values,
            output,
        } => {
            let cfg = effective_config(cli, None)?;
            let axis: Axis = axis.parse()?;
            let corpus = load_corpus(corpus)?;
            let rows = ablate(&corpus, &cfg, axis, values, threads)?;
            emit(output.as_deref(), &ablation_csv(&cfg, axis.as_str(), &rows))
        }
        Command::Export {
            corpus,
            checkpoint,
            output,
        } => {
            let ckpt: Option<Checkpoint> = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let cfg = effective_config(cli, ckpt.as_ref().map(|c| &c.config))?;
            let corpus = load_corpus(corpus)?;
            let identity;
            let reencoder = match &ckpt {
                Some(c) => &c.reencoder,
                None => {
                    identity = divrank_core::reencoder::ReEncoderModel::zeros(corpus.dim(), 1, 0.0)?;
                    &identity
                }
            };
            emit(output.as_deref(), &pca_csv(&corpus, reencoder, &cfg)?)
        }
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("divrank: error: {e}");
            ExitCode::from(1)
        }
    }
}
