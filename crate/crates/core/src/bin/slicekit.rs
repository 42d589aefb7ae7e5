use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use slicekit::harness::{self, ExperimentConfig, ExperimentId};
use slicekit::Error;

/// Slice-based learning experiments on synthetic data.
#[derive(Parser)]
#[command(name = "slicekit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Vanilla vs SBL on the perturbed-boundary data, with decision-region SVGs.
    Overview(RunArgs),
    /// SBL under each attention mode on random slices.
    Ablate(RunArgs),
    /// Sweep of d = d' for every method.
    Scale(RunArgs),
    /// SBL with increasingly noisy SFs; indicator heatmaps.
    Noise(RunArgs),
    /// All baselines vs SBL at the default sizes.
    Compare(RunArgs),
    /// Consolidate every summary under a directory.
    Report {
        /// Directory holding `{experiment}/summary.json` files.
        dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; omitted means the experiment's defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use seeds 0..N.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit with status 4 if an acceptance threshold is missed.
    #[arg(long)]
    check: bool,
    /// Override one config key, e.g. `--set hp.finetune_epochs=50`.
    #[arg(long = "set", value_name = "KEY=JSON")]
    overrides: Vec<String>,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_CHECK: u8 = 4;

fn exit_for(err: &Error) -> ExitCode {
    match err {
        Error::Config(_) | Error::Spec(_) | Error::Split { .. } | Error::Parse(_) | Error::Json(_) => {
            ExitCode::from(EXIT_CONFIG)
        }
        Error::Diverged { .. } => ExitCode::from(EXIT_DIVERGED),
        _ => ExitCode::FAILURE,
    }
}

fn load_config(exp: ExperimentId, args: &RunArgs) -> slicekit::Result<ExperimentConfig> {
    let text = match &args.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        None => format!(r#"{{"experiment": "{exp}"}}"#),
    };
    let mut overrides = args.overrides.clone();
    if let Some(n) = args.seeds {
        overrides.push(format!(
            "seeds={}",
            serde_json::to_string(&(0..n).collect::<Vec<_>>())?
        ));
    }
    if let Some(out) = &args.out {
        overrides.push(format!("out={}", serde_json::to_string(out)?));
    }
    let cfg = ExperimentConfig::from_json_with_overrides(&text, &overrides)?;
    if cfg.experiment != exp {
        return Err(Error::Config(format!(
            "config is for `{}` but the `{exp}` command was run",
            cfg.experiment
        )));
    }
    Ok(cfg)
}

fn run(exp: ExperimentId, args: &RunArgs) -> ExitCode {
    let cfg = match load_config(exp, args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let summary = match harness::run_experiment(&cfg) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_for(&e);
        }
    };
    print!("{}", harness::format_summary(&summary));
    let mut failed = false;
    for c in harness::checks_for(&summary) {
        println!(
            "[{}] criterion {}: {} - {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.criterion,
            c.name,
            c.detail
        );
        failed |= !c.passed;
    }
    if args.check && failed {
        return ExitCode::from(EXIT_CHECK);
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    if let Ok(n) = std::env::var("SLICEKIT_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: cannot start thread pool: {e}");
                    return ExitCode::FAILURE;
                }
            }
            _ => {
                eprintln!("error: SLICEKIT_THREADS must be a positive integer, got `{n}`");
                return ExitCode::from(EXIT_CONFIG);
            }
        }
    }
    let cli = Cli::parse();
    match &cli.command {
        Command::Overview(a) => run(ExperimentId::Overview, a),
        Command::Ablate(a) => run(ExperimentId::Ablate, a),
        Command::Scale(a) => run(ExperimentId::Scale, a),
        Command::Noise(a) => run(ExperimentId::Noise, a),
        Command::Compare(a) => run(ExperimentId::Compare, a),
        Command::Report { dir } => match harness::report(dir) {
            Ok(text) => {
                print!("{text}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                exit_for(&e)
            }
        },
    }
}
