//! `assoc`: corpus-to-concept-map pipeline CLI.
//!
//! Exit codes: 0 success, 1 usage/configuration, 2 data/format, 3 numeric.

mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use assoc_core::clustering::SourceTag;
use assoc_core::error::{Error, Result};
use assoc_core::synthbench::{bench_train_config, run_benchmark, PlantedConfig};
use assoc_core::validation::RecallConfig;
use assoc_core::workspace::{PipelineConfig, Workspace};

#[derive(Parser)]
#[command(name = "assoc", version, about = "Temporal co-occurrence concept maps over text corpora")]
struct Cli {
    /// Workspace directory holding all pipeline artifacts.
    #[arg(long, global = true, default_value = "workspace")]
    workspace: PathBuf,

    /// Pipeline config file (TOML). Defaults to the workspace snapshot.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the training and clustering seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk a directory of text files into the workspace.
    Ingest(IngestArgs),
    /// Produce the raw embedding store for every chunk.
    Embed(EmbedArgs),
    /// Pair-space operations.
    Pairs {
        #[command(subcommand)]
        command: PairsCommand,
    },
    /// Train the association transform on co-occurrence pairs.
    Train(TrainArgs),
    /// k-means over a source space at the configured granularities.
    Cluster(ClusterArgs),
    /// Confound controls, the shuffle control, and baselines.
    Validate {
        #[command(subcommand)]
        command: ValidateCommand,
    },
    /// Assign an unseen text to existing clusters.
    Assign(AssignArgs),
    /// Synthetic benchmarks.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
    /// Emit report.json and report.html from workspace artifacts.
    Report,
    /// Run the full pipeline (ingest through validate), skipping
    /// completed stages.
    Run(IngestArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Directory of UTF-8 plain-text files.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    chunk_len: Option<usize>,
    #[arg(long)]
    overlap: Option<usize>,
    #[arg(long)]
    strip_boilerplate: bool,
}

#[derive(Args)]
struct EmbedArgs {
    /// precomputed | remote | synthetic
    #[arg(long)]
    provider: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    /// Existing store file for the precomputed provider.
    #[arg(long)]
    store: Option<PathBuf>,
}

#[derive(Subcommand)]
enum PairsCommand {
    /// Print per-book and total pair counts.
    Stats,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    epochs1: Option<u32>,
    #[arg(long)]
    epochs2: Option<u32>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct ClusterArgs {
    /// association | raw | context | random
    #[arg(long, default_value = "association")]
    source: String,
    /// Comma-separated k values; defaults to the configured set.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
}

#[derive(Subcommand)]
enum ValidateCommand {
    /// Position, token-count, and dominance flags over cluster stats.
    Controls {
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
    },
    /// Retrain on shuffled chunk order and compare cross-boundary recall.
    Shuffle {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cluster a baseline source and compare against raw/association.
    Baseline {
        /// context | random
        source: String,
    },
}

#[derive(Args)]
struct AssignArgs {
    /// Text file to assign.
    #[arg(long)]
    text: PathBuf,
    /// Comma-separated k values, or "all" for the configured set.
    #[arg(long, default_value = "all")]
    k: String,
    /// Also profile against raw-space centroids.
    #[arg(long)]
    compare_raw: bool,
    /// Name for the emitted profile (defaults to the file stem).
    #[arg(long)]
    name: Option<String>,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Generate a planted corpus, run raw/trained/shuffled pipelines, and
    /// score them against the planted labels.
    Planted {
        /// PlantedConfig as JSON; omit for the default configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output report path.
        #[arg(long, default_value = "bench_report.json")]
        out: PathBuf,
        #[arg(long)]
        epochs1: Option<u32>,
        #[arg(long)]
        epochs2: Option<u32>,
    },
}

fn load_config(cli: &Cli) -> Result<Option<PipelineConfig>> {
    match &cli.config {
        Some(path) => Ok(Some(PipelineConfig::load(path)?)),
        None => Ok(None),
    }
}

fn open_workspace(cli: &Cli, mutate: impl FnOnce(&mut PipelineConfig)) -> Result<Workspace> {
    let mut config = match load_config(cli)? {
        Some(c) => c,
        None => {
            let snapshot = cli.workspace.join("config.toml");
            if snapshot.exists() {
                PipelineConfig::load(&snapshot)?
            } else {
                PipelineConfig::default()
            }
        }
    };
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
        config.clustering.seed = seed;
    }
    mutate(&mut config);
    Workspace::open(&cli.workspace, Some(config))
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }

    match &cli.command {
        Command::Ingest(args) | Command::Run(args) => {
            let run_all = matches!(cli.command, Command::Run(_));
            let ws = open_workspace(&cli, |c| {
                if let Some(input) = &args.input {
                    c.corpus.input = input.display().to_string();
                }
                if let Some(n) = args.chunk_len {
                    c.corpus.chunk_len = n;
                }
                if let Some(n) = args.overlap {
                    c.corpus.overlap = n;
                }
                if args.strip_boilerplate {
                    c.corpus.strip_boilerplate = true;
                }
            })?;
            if run_all {
                stages::run_pipeline(&ws)
            } else {
                stages::ingest(&ws)
            }
        }
        Command::Embed(args) => {
            let ws = open_workspace(&cli, |c| {
                if let Some(p) = &args.provider {
                    c.embedding.provider = p.clone();
                }
                if let Some(e) = &args.endpoint {
                    c.embedding.endpoint = e.clone();
                }
                if let Some(d) = args.dim {
                    c.embedding.dim = d;
                }
                if let Some(s) = &args.store {
                    c.embedding.store = s.display().to_string();
                }
            })?;
            stages::embed(&ws)
        }
        Command::Pairs { command: PairsCommand::Stats } => {
            let ws = open_workspace(&cli, |_| {})?;
            stages::pairs_stats(&ws)
        }
        Command::Train(args) => {
            let ws = open_workspace(&cli, |c| {
                if let Some(n) = args.epochs1 {
                    c.train.epochs_phase1 = n;
                }
                if let Some(n) = args.epochs2 {
                    c.train.epochs_phase2 = n;
                }
                if let Some(n) = args.batch {
                    c.train.batch_size = n;
                }
                if let Some(t) = args.tau {
                    c.train.temperature = t;
                }
                if let Some(lr) = args.lr {
                    c.train.learning_rate = lr;
                }
            })?;
            stages::train_stage(&ws)
        }
        Command::Cluster(args) => {
            let source: SourceTag = args.source.parse()?;
            let ws = open_workspace(&cli, |_| {})?;
            stages::cluster_stage(&ws, &[source], args.k.clone())?;
            if source == SourceTag::Association {
                stages::mark_cluster_complete(&ws)?;
            }
            Ok(())
        }
        Command::Validate { command } => {
            let ws = open_workspace(&cli, |_| {})?;
            match command {
                ValidateCommand::Controls { k } => stages::validate_controls(&ws, k.clone()),
                ValidateCommand::Shuffle { seed } => stages::validate_shuffle(&ws, *seed),
                ValidateCommand::Baseline { source } => {
                    stages::validate_baseline(&ws, source.parse()?)
                }
            }
        }
        Command::Assign(args) => {
            let ws = open_workspace(&cli, |_| {})?;
            let ks = if args.k == "all" {
                None
            } else {
                Some(
                    args.k
                        .split(',')
                        .map(|s| {
                            s.trim()
                                .parse::<usize>()
                                .map_err(|_| Error::Config(format!("bad k value {s:?}")))
                        })
                        .collect::<Result<Vec<_>>>()?,
                )
            };
            stages::assign(&ws, &args.text, ks, args.compare_raw, args.name.clone())
        }
        Command::Bench {
            command: BenchCommand::Planted { config, out, epochs1, epochs2 },
        } => {
            let planted = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                    serde_json::from_str::<PlantedConfig>(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
                }
                None => PlantedConfig::default(),
            };
            let mut train_cfg = bench_train_config(cli.seed.unwrap_or(planted.seed));
            if let Some(n) = epochs1 {
                train_cfg.epochs_phase1 = *n;
            }
            if let Some(n) = epochs2 {
                train_cfg.epochs_phase2 = *n;
            }
            let recall = RecallConfig::default();
            let report = run_benchmark(&planted, &train_cfg, &recall)?;
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Data(format!("bench encode: {e}")))?;
            std::fs::write(out, &json).map_err(|e| Error::io(out, e))?;
            println!(
                "bench planted: NMI raw {:.3} association {:.3} shuffled {:.3} (margin {:.3}); \
                 recall {:.3} -> {:.3}",
                report.raw.nmi_vs_functions,
                report.association.nmi_vs_functions,
                report.shuffled.nmi_vs_functions,
                report.nmi_margin,
                report.recall_trained,
                report.recall_shuffled
            );
            Ok(())
        }
        Command::Report => {
            let ws = open_workspace(&cli, |_| {})?;
            let (json, html) = assoc_core::report::emit_report(&ws)?;
            println!("report: wrote {} and {}", json.display(), html.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
