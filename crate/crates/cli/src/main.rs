use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nestednet::cli::commands::{
    cmd_eval, cmd_extract, cmd_gradcheck, cmd_prune, cmd_report, cmd_report_config, cmd_train, EvalTarget, RunOutcome,
};
use nestednet::cli::config::{parse_config, preset, PRESETS};
use nestednet::{Error, Result};

/// Nested sparse networks: one parameter set, several runnable levels.
#[derive(Parser)]
#[command(name = "nestednet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every level jointly from a config file.
    Train(ConfigArg),
    /// Iterative prune-and-continue over the config's threshold schedule.
    Prune(ConfigArg),
    /// Per-level test accuracy and cost of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding the dataset files.
        #[arg(long)]
        data: PathBuf,
        /// One level (1 = core); default evaluates all levels.
        #[arg(long, conflicts_with = "consensus")]
        level: Option<usize>,
        /// Only the consensus head.
        #[arg(long)]
        consensus: bool,
        /// Evaluate on the first N test samples.
        #[arg(long)]
        limit: Option<usize>,
        /// Also write the rows as tab-separated values.
        #[arg(long)]
        tsv: Option<PathBuf>,
    },
    /// Write one level of a channel/layer-scheduled checkpoint as a standalone network.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        level: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-level size and cost of a checkpoint or a config.
    Report {
        #[arg(long, required_unless_present = "config", conflicts_with = "config")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a bundled config.
    Preset { name: String },
}

#[derive(Args)]
struct ConfigArg {
    #[arg(long)]
    config: PathBuf,
}

fn print_outcome(o: &RunOutcome) {
    for (k, (acc, d)) in o.level_accuracy.iter().zip(&o.densities).enumerate() {
        println!("L{}  accuracy {:.2}%  density {:.2}%", k + 1, 100.0 * acc, 100.0 * d);
    }
    if let Some(c) = o.consensus_accuracy {
        println!("consensus  accuracy {:.2}%", 100.0 * c);
    }
    println!("checkpoint {}", o.checkpoint.display());
    println!("metrics    {}", o.metrics.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => print_outcome(&cmd_train(&parse_config(&c.config)?)?),
        Command::Prune(c) => print_outcome(&cmd_prune(&parse_config(&c.config)?)?),
        Command::Eval {
            checkpoint,
            data,
            level,
            consensus,
            limit,
            tsv,
        } => {
            let target = match (level, consensus) {
                (Some(k), _) => EvalTarget::Level(k),
                (None, true) => EvalTarget::Consensus,
                (None, false) => EvalTarget::All,
            };
            let report = cmd_eval(&checkpoint, &data, target, limit)?;
            print!("{}", report.to_text());
            if let Some(path) = tsv {
                std::fs::write(&path, report.to_tsv()).map_err(|e| Error::Io { path, source: e })?;
            }
        }
        Command::Extract { checkpoint, level, out } => {
            let params = cmd_extract(&checkpoint, level, &out)?;
            println!("wrote {} ({params} parameters)", out.display());
        }
        Command::Report { checkpoint, config } => match (checkpoint, config) {
            (Some(ck), _) => print!("{}", cmd_report(&ck)?),
            (None, Some(cfg)) => print!("{}", cmd_report_config(&parse_config(&cfg)?)?),
            (None, None) => unreachable!("clap requires one of them"),
        },
        Command::Gradcheck { seed } => {
            let (text, reports) = cmd_gradcheck(seed)?;
            print!("{text}");
            if let Some(bad) = reports.iter().find(|r| !r.passed()) {
                return Err(Error::Verification(format!(
                    "{} gradient off by {:.3e} at {}",
                    bad.name, bad.max_rel, bad.worst
                )));
            }
        }
        Command::Preset { name } => match preset(&name) {
            Some(text) => print!("{text}"),
            None => {
                return Err(Error::Config(format!(
                    "unknown preset `{name}`, expected one of {PRESETS:?}"
                )));
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Ok(v) = std::env::var("NESTEDNET_THREADS") {
        match v.trim().parse::<usize>() {
            Ok(n) => nestednet::tensor::set_threads(n),
            Err(_) => {
                eprintln!("error: NESTEDNET_THREADS must be a non-negative integer, got `{v}`");
                return ExitCode::from(1);
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
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
