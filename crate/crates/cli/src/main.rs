use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sharcs::datamodel::Modality;
use sharcs::explain::Retrieval;
use sharcs::training::Regime;
use sharcs_cli::reproduce::cmd_reproduce;
use sharcs_cli::{
    cmd_eval, cmd_explain, cmd_generate, cmd_train, load_config, parse_metrics, parse_model,
    CliError, CliResult, ExplainRequest, GlobalOptions,
};

#[derive(Parser, Debug)]
#[command(
    name = "sharcs",
    version,
    about = "Shared concept spaces on XOR-AND-XOR"
)]
struct Cli {
    /// JSON experiment configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (dataset seed for `generate`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Parallel worker processes for `reproduce`.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand, Debug)]
enum Commands {
    /// Generate the XOR-AND-XOR dataset.
    Generate {
        #[arg(long)]
        n_samples: Option<usize>,
        /// Dataset file (default: <out>/dataset.json).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train SHARCS or a baseline.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated subset of acc,compl,miss,retr.
        #[arg(long, default_value = "all")]
        metrics: String,
        /// Ledger CSV (default: <out>/ledger.csv).
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
    /// Export explanations from a trained model.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[command(subcommand)]
        procedure: ExplainCommand,
    },
    /// Train and evaluate every model over several seeds.
    Reproduce {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// `sharcs` or a baseline: unimodal_plain, unimodal_cbm, simple_multimodal,
    /// concept_multimodal, relative.
    #[arg(long, default_value = "sharcs")]
    model: String,
    /// Modality of a unimodal baseline.
    #[arg(long)]
    modality: Option<Modality>,
    /// end_to_end, sequential or local_pretrain.
    #[arg(long)]
    regime: Option<Regime>,
    /// Make local labels available for training.
    #[arg(long)]
    local_supervision: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum ExplainCommand {
    /// Training sample closest to the centroid of a concept code.
    Prototype {
        #[arg(long)]
        code: String,
    },
    /// Training samples within a radius of a query.
    Neighborhood {
        #[arg(long)]
        query: usize,
        #[arg(long)]
        modality: Modality,
        #[arg(long)]
        radius: f64,
    },
    /// Nearest samples of the other modality.
    CrossModal {
        #[arg(long)]
        query: usize,
        #[arg(long)]
        source: Modality,
        #[arg(long, conflicts_with = "radius")]
        top_k: Option<usize>,
        #[arg(long)]
        radius: Option<f64>,
    },
    /// Fill in a missing modality from its nearest neighbour.
    Substitute {
        #[arg(long)]
        query: usize,
        #[arg(long)]
        missing: Modality,
    },
    /// 2D projection of the shared space as CSV.
    Embedding,
}

fn run(cli: Cli) -> CliResult<()> {
    let opts = GlobalOptions {
        config: cli.config,
        out: cli.out,
    };
    let mut cfg = load_config(&opts)?;
    let out_dir = PathBuf::from(&cfg.output_dir);
    match cli.command {
        Commands::Generate { n_samples, output } => {
            if let Some(seed) = cli.seed {
                cfg.dataset.seed = seed;
            }
            if let Some(n) = n_samples {
                cfg.dataset.n_samples = n;
            }
            cfg.validate()?;
            let path = output.unwrap_or_else(|| out_dir.join("dataset.json"));
            let summary = cmd_generate(&cfg.dataset, &path)?;
            println!(
                "wrote {} samples to {} ({} positive, {} negative)",
                summary.samples,
                summary.path.display(),
                summary.positives,
                summary.samples - summary.positives
            );
        }
        Commands::Train(args) => {
            if let Some(seed) = cli.seed {
                cfg.train.seed = seed;
            }
            if let Some(regime) = args.regime {
                cfg.train.regime = regime;
            }
            if let Some(epochs) = args.epochs {
                cfg.train.epochs = epochs;
                cfg.train.phase2_epochs = epochs;
            }
            if let Some(lambda) = args.lambda {
                cfg.loss.lambda = lambda;
            }
            if args.local_supervision {
                cfg.local_supervision = true;
                if cfg.train.regime == Regime::LocalPretrain {
                    cfg.model.local_predictors = true;
                }
            }
            if cfg.train.regime == Regime::LocalPretrain && !cfg.local_supervision {
                return Err(CliError::Config(
                    "local_pretrain needs local labels; pass --local-supervision".into(),
                ));
            }
            let kind = parse_model(&args.model, args.modality)?;
            let summary = cmd_train(&cfg, &args.dataset, kind)?;
            println!("checkpoint {}", summary.checkpoint.display());
            println!("history {}", summary.history.display());
            println!("final test accuracy {:.4}", summary.final_accuracy);
        }
        Commands::Eval {
            checkpoint,
            dataset,
            metrics,
            ledger,
        } => {
            let metrics = parse_metrics(&metrics)?;
            let ledger = ledger.unwrap_or_else(|| out_dir.join("ledger.csv"));
            let summary = cmd_eval(&checkpoint, &dataset, metrics, &ledger)?;
            println!("{}", summary.report.ledger_row());
            println!("report {}", summary.report_path.display());
        }
        Commands::Explain {
            checkpoint,
            dataset,
            procedure,
        } => {
            let request = match procedure {
                ExplainCommand::Prototype { code } => ExplainRequest::Prototype { code },
                ExplainCommand::Neighborhood {
                    query,
                    modality,
                    radius,
                } => ExplainRequest::Neighborhood {
                    query,
                    modality,
                    radius,
                },
                ExplainCommand::CrossModal {
                    query,
                    source,
                    top_k,
                    radius,
                } => ExplainRequest::CrossModal {
                    query,
                    source,
                    retrieval: match radius {
                        Some(r) => Retrieval::Radius(r),
                        None => Retrieval::TopK(top_k.unwrap_or(5)),
                    },
                },
                ExplainCommand::Substitute { query, missing } => {
                    ExplainRequest::Substitute { query, missing }
                }
                ExplainCommand::Embedding => ExplainRequest::Embedding,
            };
            let output = cmd_explain(&checkpoint, &dataset, &request, &out_dir)?;
            if let Some(e) = &output.explanation {
                for hit in &e.results {
                    println!("{} {} {:.6}", hit.id, hit.modality.name(), hit.distance);
                }
            }
            for path in output.json_path.iter().chain(&output.csv_path) {
                println!("wrote {}", path.display());
            }
        }
        Commands::Reproduce { seeds } => {
            let exe = std::env::current_exe()?;
            let summary = cmd_reproduce(&cfg, &seeds, cli.workers, &exe)?;
            println!("{}", summary.table);
            for criterion in &summary.criteria {
                println!("{criterion}");
            }
            std::fs::write(
                out_dir.join("summary.json"),
                serde_json::to_vec_pretty(&summary)?,
            )?;
        }
    }
    Ok(())
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
