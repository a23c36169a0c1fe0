use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use fineprune_cli::run::{self, MODEL_FILE, SCORES_FILE};
use fineprune_cli::{exit_code, report, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "fineprune", version, about = "Locate bias in a toy encoder by pruning it against a debiasing objective")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// Suppress progress messages on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the corpus and pretrain an encoder.
    Pretrain,
    /// Prune attention blocks against the debias objective.
    Fineprune {
        /// Model checkpoint; defaults to <out>/model.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `square-<B>` or `value-head`.
        #[arg(long)]
        geometry: Option<String>,
        /// Debias mode such as `all-token` or `intermediate-sentence`.
        #[arg(long)]
        mode: Option<String>,
        /// Train the weights together with the scores.
        #[arg(long)]
        no_freeze: bool,
    },
    /// Fine-tune all weights on the debias objective, without pruning.
    DebiasOnly {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Measure association effect sizes, stereotype score and probe accuracy.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score checkpoint; the model is masked at the final threshold.
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Also write densities, heatmap and trade-off CSV files.
        #[arg(long)]
        emit_csv: bool,
    },
    /// Fine-prune every configured geometry × mode pair.
    Sweep {
        /// Shared model checkpoint; pretrained into <out> when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn config(cli: &Cli) -> fineprune::Result<RunConfig> {
    let mut config = match &cli.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.common.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.common.out {
        config.out = out.clone();
    }
    match &cli.command {
        Command::Fineprune {
            geometry,
            mode,
            no_freeze,
            ..
        } => {
            if let Some(g) = geometry {
                config.pruning.geometry = g.clone();
            }
            if let Some(m) = mode {
                config.debias.mode = m.clone();
            }
            if *no_freeze {
                config.pruning.freeze_weights = false;
            }
        }
        Command::DebiasOnly { mode: Some(m), .. } => config.debias.mode = m.clone(),
        _ => {}
    }
    config.validate()?;
    Ok(config)
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    let config = config(cli)?;
    if cli.common.print_config {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let progress = |msg: &str| eprintln!("{msg}");
    let log: run::Log = if cli.common.quiet { &run::quiet } else { &progress };
    let default_checkpoint = || config.out.join(MODEL_FILE);
    match &cli.command {
        Command::Pretrain => {
            let summary = run::cmd_pretrain(&config, log)?;
            println!(
                "pretrained {} parameters, loss {:.4} -> {:.4}",
                summary.num_params,
                summary.initial_loss,
                summary.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
            println!("checkpoint {}", config.out.join(MODEL_FILE).display());
        }
        Command::Fineprune { checkpoint, .. } => {
            let path = checkpoint.clone().unwrap_or_else(default_checkpoint);
            let report = run::cmd_fineprune(&config, &path, log).with_context(|| format!("fine-pruning {}", path.display()))?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", report::fineprune_table(&report));
            println!("scores {}", config.out.join(SCORES_FILE).display());
        }
        Command::DebiasOnly { checkpoint, .. } => {
            let path = checkpoint.clone().unwrap_or_else(default_checkpoint);
            let report = run::cmd_debias_only(&config, &path, log).with_context(|| format!("debiasing {}", path.display()))?;
            print!("{}", report::debias_table(&report));
        }
        Command::Evaluate {
            checkpoint,
            scores,
            emit_csv,
        } => {
            let path = checkpoint.clone().unwrap_or_else(default_checkpoint);
            let report = run::cmd_evaluate(&config, &path, scores.as_deref(), *emit_csv)
                .with_context(|| format!("evaluating {}", path.display()))?;
            print!("{}", report::eval_table(&report));
        }
        Command::Sweep { checkpoint } => {
            let outcome = run::cmd_sweep(&config, checkpoint.as_deref(), log)?;
            if !outcome.skipped.is_empty() {
                eprintln!("resumed: {} runs already complete", outcome.skipped.len());
            }
            print!("{}", report::sweep_table(&outcome.report));
        }
    }
    Ok(())
}

/// The context chain joined by `: `, dropping causes whose text the
/// previous message already ends with.
fn message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if out.ends_with(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let category = err
                .chain()
                .find_map(|e| e.downcast_ref::<fineprune::Error>())
                .map_or(fineprune::ErrorCategory::Internal, fineprune::Error::category);
            eprintln!("error[{}]: {}", category.as_str(), message(&err));
            ExitCode::from(exit_code(category))
        }
    }
}
