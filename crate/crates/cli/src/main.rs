//! `mtsunet` command-line driver.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 data error, 4 internal
//! error.

mod ablate;
mod data;
mod eval;
mod explain;
mod fail;
mod out;
mod phantom;
mod report;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fail::{Failure, EXIT_INTERNAL, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "mtsunet", version, about = "Multi-task glioma segmentation and molecular classification")]
struct Cli {
    /// Log verbosity (error, warn, info, debug); RUST_LOG takes precedence.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic phantom cases and a manifest.
    Phantom(phantom::PhantomArgs),
    /// Cross-validated training with per-fold checkpoints and a report.
    Train(train::TrainArgs),
    /// Evaluate one checkpoint or an ensemble on a manifest.
    Eval(eval::EvalArgs),
    /// Run an ablation grid: modules, depth or sequences.
    Ablate(ablate::AblateArgs),
    /// Occlusion or Grad-CAM heatmap for one case.
    Explain(explain::ExplainArgs),
    /// Classification metrics from a predictions CSV.
    Report(report::ReportArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .parse_default_env()
        .format_timestamp(None)
        .init();

    let result = std::panic::catch_unwind(|| match cli.command {
        Command::Phantom(a) => phantom::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Ablate(a) => ablate::run(a),
        Command::Explain(a) => explain::run(a),
        Command::Report(a) => report::run(a),
    });
    match result {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(Failure { code, message })) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
        Err(_) => ExitCode::from(EXIT_INTERNAL),
    }
}
