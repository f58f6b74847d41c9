//! `dncshap`: train the toy fusion model, attribute its predictions, build
//! labels from two classifiers' outputs, score predictions and compute
//! spectrograms.

mod attribute;
mod error;
mod eval;
mod files;
mod label;
mod spectrogram;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "dncshap",
    version,
    about = "Divide-and-conquer Shapley attribution for image + speech classifiers"
)]
struct Cli {
    /// Worker threads for attribution (default: one per core).
    #[arg(long, global = true, env = "DNC_ATTRIB_JOBS")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the fusion model on synthetic or listed data.
    Train(train::TrainArgs),
    /// Attribute one prediction to image and spectrogram regions.
    Attribute(attribute::AttributeArgs),
    /// Merge speech and image classifier outputs into labels.
    Label(label::LabelArgs),
    /// Accuracy, macro-F1, Cohen's kappa and confusion matrix.
    Eval(eval::EvalArgs),
    /// Log-mel spectrogram of a WAV file.
    Spectrogram(spectrogram::SpectrogramArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Train(args) => train::run(args),
        Command::Attribute(args) => attribute::run(args),
        Command::Label(args) => label::run(args),
        Command::Eval(args) => eval::run(args),
        Command::Spectrogram(args) => spectrogram::run(args),
    }
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
            ExitCode::from(e.exit_code())
        }
    }
}
