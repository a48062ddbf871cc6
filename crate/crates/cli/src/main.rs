use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sda_cli::commands;
use sda_cli::config::{key_help, parse_override, RunConfig};
use sda_cli::{emit, CliError};

#[derive(Parser)]
#[command(name = "sda", version, about = "Train, evaluate and probe latent-domain gated text classifiers")]
#[command(after_long_help = key_help())]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (flat `key = value`; see `sda --help` for keys).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set lambda=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes model.ckpt, model.json, vocab.txt and train_log.jsonl.
    Train(Common),
    /// Evaluate on the test set; writes per-domain accuracy tables and predictions.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model directory (defaults to the configured output).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train and evaluate once per lambda; writes sweep.tsv.
    SweepLambda {
        #[command(flatten)]
        common: Common,
        /// Run each configuration as a separate `sda` process.
        #[arg(long)]
        child_runs: bool,
    },
    /// Linear probes of the latent gate for each lambda; writes probe.tsv.
    Probe(Common),
    /// Export gate samples or hidden vectors as TSV.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Generate the synthetic multi-domain corpus from the synth.* keys.
    GenSynth(Common),
    /// Mean ± standard deviation over eval manifests (or run directories).
    Summarize {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        /// Tab-separated output instead of a table.
        #[arg(long)]
        tsv: bool,
    },
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let overrides = common.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
    RunConfig::load(common.config.as_deref(), &overrides)
}

fn run(cmd: &Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Train(c) => commands::run_train(&load(c)?).map(drop),
        Cmd::Eval { common, model } => commands::run_eval(&load(common)?, model.as_deref()).map(drop),
        Cmd::SweepLambda { common, child_runs } => commands::run_sweep(&load(common)?, *child_runs),
        Cmd::Probe(c) => commands::run_probe(&load(c)?).map(drop),
        Cmd::Export { common, model } => commands::run_export(&load(common)?, model.as_deref()).map(drop),
        Cmd::GenSynth(c) => commands::run_gen_synth(&load(c)?).map(drop),
        Cmd::Summarize { manifests, tsv } => {
            print!("{}", commands::run_summarize(manifests, *tsv)?);
            Ok(())
        }
    }
}

fn name(cmd: &Cmd) -> &'static str {
    match cmd {
        Cmd::Train(_) => "train",
        Cmd::Eval { .. } => "eval",
        Cmd::SweepLambda { .. } => "sweep-lambda",
        Cmd::Probe(_) => "probe",
        Cmd::Export { .. } => "export",
        Cmd::GenSynth(_) => "gen-synth",
        Cmd::Summarize { .. } => "summarize",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            emit(&e.diagnostic(name(&cli.command)));
            ExitCode::from(e.exit_code())
        }
    }
}
