use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use proofsynth::config::RunConfig;
use proofsynth::pipeline::{self, PipelineError, RunOptions};
use proofsynth::prompt::Profile;

#[derive(Parser)]
#[command(name = "proofsynth", version, about = "Retrieval-augmented synthesis and checking of definitions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the prompt budget profile.
    #[arg(long)]
    profile: Option<Profile>,
}

#[derive(Subcommand)]
enum Command {
    /// Check the corpus and split assignment.
    Validate(ConfigArgs),
    /// Assign splits and write a labelled corpus.
    Split {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build or refresh the retrieval index cache.
    Index(ConfigArgs),
    /// Train the premise selector on the training split.
    TrainPremises(ConfigArgs),
    /// Rank premises for evaluation goals and report MAP and NDCG.
    EvalPremises(ConfigArgs),
    /// Generate and check candidates, resuming earlier progress.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Generate at most N new examples.
        #[arg(long)]
        limit: Option<usize>,
        /// Checker processes.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Compute metrics over one or more run reports.
    Score {
        #[arg(long = "report", required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        k: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// List training/test definitions with identical bodies.
    Clones(ConfigArgs),
}

fn load(args: &ConfigArgs) -> Result<RunConfig, PipelineError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(p) = args.profile {
        cfg.prompt.profile = p;
    }
    Ok(cfg)
}

fn show(path: &Path) -> String {
    path.display().to_string()
}

fn execute(command: Command) -> Result<ExitCode, PipelineError> {
    match command {
        Command::Validate(args) => {
            let cfg = load(&args)?;
            let report = pipeline::validate(&cfg)?;
            println!("{} records in {} files", report.records, report.files);
            for (split, n) in &report.split_sizes {
                println!("  {split}: {n}");
            }
            if !report.clones.is_empty() {
                println!("warnings:");
                for (a, b) in &report.clones {
                    println!("  clone: {a} duplicates {b}");
                }
            }
            if report.violations.is_empty() {
                println!("ok");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("violations:");
                for v in &report.violations {
                    println!("  {v}");
                }
                Ok(ExitCode::from(2))
            }
        }
        Command::Split { cfg, out } => {
            let sizes = pipeline::write_split_corpus(&load(&cfg)?, &out)?;
            for (split, n) in sizes {
                println!("{split}: {n}");
            }
            println!("wrote {}", show(&out));
            Ok(ExitCode::SUCCESS)
        }
        Command::Index(args) => {
            let n = pipeline::build_index(&load(&args)?)?;
            println!("indexed {n} records");
            Ok(ExitCode::SUCCESS)
        }
        Command::TrainPremises(args) => {
            let s = pipeline::train_premises(&load(&args)?)?;
            for goal in &s.insufficient {
                log::warn!("{goal}: too few negatives");
            }
            println!("trained on {} goals for {} epochs, final loss {}", s.examples, s.epochs, s.final_loss);
            println!("model {}, loss curve {}", show(&s.model_path), show(&s.loss_csv));
            Ok(ExitCode::SUCCESS)
        }
        Command::EvalPremises(args) => {
            let m = pipeline::eval_premises(&load(&args)?)?;
            println!("MAP {} NDCG {} over {} goals", m.map, m.ndcg, m.goals);
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { cfg, limit, workers } => {
            let s = pipeline::run(&load(&cfg)?, RunOptions { limit, workers })?;
            println!(
                "{}/{} examples complete ({} generated, {} candidates checked, {} checker restarts)",
                s.completed, s.total, s.generated_now, s.checked_now, s.checker_restarts
            );
            println!("report {}", show(&s.report));
            Ok(ExitCode::SUCCESS)
        }
        Command::Score { reports, k, out } => {
            let summary = pipeline::score(&reports, &k, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary["verify_at_nk"]).unwrap_or_default());
            println!("tables written to {}", show(&out));
            Ok(ExitCode::SUCCESS)
        }
        Command::Clones(args) => {
            let report = pipeline::validate(&load(&args)?)?;
            for (a, b) in &report.clones {
                println!("{a}\t{b}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
