use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use semidpo::commands::{self, Context, EvalInputs, FilterOutputs};
use semidpo::config::RunConfig;
use semidpo::CliResult;

/// Semi-supervised preference alignment lab for small diffusion models.
#[derive(Debug, Parser)]
#[command(name = "semidpo", version)]
struct Cli {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a config field by its path, e.g. `--set train.beta=5`.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shorthand for `--set workers=N`.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic preference dataset.
    Gen {
        /// Output file (default: `paths.dataset`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split a dataset into consensus-clean and noisy files.
    Filter {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Directory for the outputs (default: next to the dataset).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Pretrain a reference, then run the cold start and self-training.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// `semi`, `clean_only` or `dpo_all` (shorthand for `--set train.mode=..`).
        #[arg(long)]
        mode: Option<String>,
        /// Use this reference checkpoint instead of pretraining one.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Gradient-variance decomposition per reward dimension and timestep bucket.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Reference checkpoint (default: `reference.ckpt` next to the checkpoint).
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value = "diagnose.json")]
        out: PathBuf,
    },
    /// Score ancestral samples with the reward committee.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also report per-dimension win rates against this model.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// With `--reference`, measure classifier accuracy on this dataset's clean pairs.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value = "eval.json")]
        out: PathBuf,
        /// Per-dimension CSV table.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<String> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(w) = cli.workers {
        overrides.push(format!("workers={w}"));
    }
    if let Command::Train { mode: Some(m), .. } = &cli.command {
        overrides.push(format!("train.mode=\"{m}\""));
    }
    let ctx = Context::new(base.with_overrides(&overrides)?)?;
    let paths = ctx.cfg.paths.clone();
    match cli.command {
        Command::Gen { out } => commands::cmd_gen(&ctx, &out.unwrap_or(paths.dataset)),
        Command::Filter { dataset, out_dir } => {
            let dataset = dataset.unwrap_or(paths.dataset);
            let dir = out_dir.unwrap_or_else(|| dataset.parent().map(PathBuf::from).unwrap_or_default());
            commands::cmd_filter(&ctx, &dataset, &FilterOutputs::for_dataset(&dataset, &dir))
        }
        Command::Train {
            dataset,
            out_dir,
            reference,
            ..
        } => commands::cmd_train(
            &ctx,
            &dataset.unwrap_or(paths.dataset),
            &out_dir.unwrap_or(paths.out_dir),
            reference.as_deref(),
        ),
        Command::Diagnose {
            checkpoint,
            dataset,
            reference,
            out,
        } => {
            let reference = reference.unwrap_or_else(|| checkpoint.with_file_name("reference.ckpt"));
            commands::cmd_diagnose(&ctx, &checkpoint, &dataset.unwrap_or(paths.dataset), &reference, &out)
        }
        Command::Eval {
            checkpoint,
            baseline,
            dataset,
            reference,
            out,
            csv,
        } => commands::cmd_eval(
            &ctx,
            &EvalInputs {
                checkpoint: &checkpoint,
                baseline: baseline.as_deref(),
                dataset: dataset.as_deref(),
                reference: reference.as_deref(),
                out: &out,
                csv: csv.as_deref(),
            },
        ),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
