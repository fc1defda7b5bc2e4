use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use adnn_energy_lab::{run_pooled, CliError, Options, Stage};
use ael_core::testgen::Mode;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "adnn-energy-lab", version, about = "Energy-robustness experiments on adaptive neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validate config and inputs, write nothing.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    InputBased,
    Universal,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset and train (or build) the adaptive model.
    TrainAdnn(Common),
    /// Measure energy on probe inputs.
    Measure(Common),
    /// Fit the energy estimator to the measurements.
    TrainEstimator(Common),
    /// Generate energy-surging tests through the estimator.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// White-box ILFO attack on the trained model.
    Ilfo(Common),
    /// Train a surrogate on target decisions and transfer its tests.
    Surrogate(Common),
    /// Replay ILFO tests from a base model on a target model.
    Transfer(Common),
    /// Full pipeline from dataset to robustness scores.
    Evaluate(Common),
    /// Compare corruptions against generated tests.
    Robustness(Common),
    /// Train the noisy-input filter and gradient-feature detector.
    Defend(Common),
    /// Permutation-tested correlations between artifacts.
    Correlate(Common),
    /// Summarize existing artifacts and flag stale ones.
    Report(Common),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (stage, common, mode) = match cli.command {
        Command::TrainAdnn(c) => (Stage::TrainAdnn, c, None),
        Command::Measure(c) => (Stage::Measure, c, None),
        Command::TrainEstimator(c) => (Stage::TrainEstimator, c, None),
        Command::Generate { common, mode } => (
            Stage::Generate,
            common,
            mode.map(|m| match m {
                ModeArg::InputBased => Mode::InputBased,
                ModeArg::Universal => Mode::Universal,
            }),
        ),
        Command::Ilfo(c) => (Stage::Ilfo, c, None),
        Command::Surrogate(c) => (Stage::Surrogate, c, None),
        Command::Transfer(c) => (Stage::Transfer, c, None),
        Command::Evaluate(c) => (Stage::Evaluate, c, None),
        Command::Robustness(c) => (Stage::Robustness, c, None),
        Command::Defend(c) => (Stage::Defend, c, None),
        Command::Correlate(c) => (Stage::Correlate, c, None),
        Command::Report(c) => (Stage::Report, c, None),
    };
    let opts = Options { seed: common.seed, out: common.out, dry_run: common.dry_run, mode };
    match run_pooled(stage, &common.config, &opts) {
        Ok(o) => {
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{}: {}", stage.name(), o.summary);
            for a in &o.artifacts {
                let _ = writeln!(out, "  wrote {}", a.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> ExitCode {
    eprintln!("{}", e.diagnostic());
    ExitCode::from(e.code() as u8)
}
