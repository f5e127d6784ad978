mod arch;
mod dataset;
mod detect;
mod report;
mod train;

use std::fmt;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "edgefire", version, about = "Squeezed Xception training and PCB defect detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic boards and tile dataset generation.
    #[command(subcommand)]
    Dataset(dataset::DatasetCmd),
    /// Parameter accounting for the baseline and squeezed graphs.
    #[command(subcommand)]
    Arch(arch::ArchCmd),
    /// Train a classifier on a generated dataset.
    Train(train::TrainArgs),
    /// Loss and accuracy of a checkpoint on one split.
    Eval(train::EvalArgs),
    /// Grid detection on a board image.
    Detect(detect::DetectArgs),
    /// Compare finished runs side by side.
    Report(report::ReportArgs),
}

/// Bad input from the user; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// The error and its causes, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg = format!("{msg}: {c}");
        }
    }
    msg
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Dataset(c) => dataset::run(c),
        Command::Arch(c) => arch::run(c),
        Command::Train(a) => train::run_train(a),
        Command::Eval(a) => train::run_eval(a),
        Command::Detect(a) => detect::run(a),
        Command::Report(a) => report::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}
