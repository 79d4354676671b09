use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use xlearner::config::{validate_registry, ExperimentConfig, Variant};
use xlearner::pipeline::{parameter_summary, run_pipeline, Command, RunOptions};
use xlearner::Error;

#[derive(Parser)]
#[command(name = "xlearner", version, about = "Expand per-task backbones with reconciliation links, then squeeze them into one")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Overrides `global_seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the latest progress checkpoint.
    #[arg(long)]
    resume: bool,
    /// Load checkpoints even if their config hash differs.
    #[arg(long)]
    force: bool,
    /// Variant runs in parallel (compare only).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Checkpoint and exit once the running stage reaches this step.
    #[arg(long)]
    stop_after: Option<usize>,
    #[arg(long, default_value_t = 250)]
    checkpoint_every: usize,
    /// Comma-separated variant names (compare only).
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Expansion stage.
    Pretrain(Common),
    /// Distillation or pruning, per variant.
    Squeeze(Common),
    /// Linear-probe transfer evaluation of the final model.
    Evaluate(Common),
    /// Run all variants end to end and tabulate them.
    Compare(Common),
    /// SVG loss curves and probe bars for a run directory.
    Report(Common),
    /// Check a config and print its resolved form and parameter counts.
    Validate {
        #[arg(long)]
        config: PathBuf,
        /// Print issues as JSON.
        #[arg(long)]
        json: bool,
    },
}

fn options(c: &Common) -> Result<RunOptions, Error> {
    let variants = c.variants.iter().map(|v| Variant::parse(v)).collect::<Result<Vec<_>, _>>()?;
    Ok(RunOptions {
        output_dir: c.output_dir.clone(),
        seed: c.seed,
        resume: c.resume,
        force: c.force,
        jobs: c.jobs,
        stop_after: c.stop_after,
        checkpoint_every: c.checkpoint_every,
        variants,
        verbose: c.verbose,
    })
}

fn validate(config: &PathBuf, json: bool) -> Result<(), Error> {
    let text = std::fs::read_to_string(config).map_err(|e| Error::io(config, e))?;
    let cfg = ExperimentConfig::parse(&text, config)?;
    let report = validate_registry(&cfg);
    if !report.is_ok() {
        if json {
            println!("{}", report.to_json());
        } else {
            eprintln!("{report}");
        }
        return Err(Error::Validation(report.issues));
    }
    println!("config hash {}", cfg.config_hash());
    for (label, n) in parameter_summary(&cfg)? {
        println!("{label}: {n} parameters");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let (command, common) = match &cli.command {
        Cmd::Pretrain(c) => (Command::Pretrain, c),
        Cmd::Squeeze(c) => (Command::Squeeze, c),
        Cmd::Evaluate(c) => (Command::Evaluate, c),
        Cmd::Compare(c) => (Command::Compare, c),
        Cmd::Report(c) => (Command::Report, c),
        Cmd::Validate { config, json } => return validate(config, *json),
    };
    run_pipeline(&common.config, command, &options(common)?)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
