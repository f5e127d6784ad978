use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use edgefire::telemetry::{compare_runs, RunSummary};

use crate::train::SUMMARY_FILE;
use crate::usage;

#[derive(Args)]
pub struct ReportArgs {
    /// Finished run directories (each holds a run.json).
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: ReportArgs) -> Result<()> {
    if args.runs.len() < 2 {
        return Err(usage("report compares at least two runs"));
    }
    let summaries = args
        .runs
        .iter()
        .map(|dir| {
            let p = dir.join(SUMMARY_FILE);
            if !p.is_file() {
                return Err(usage(format!("{} has no {SUMMARY_FILE}; is the run finished?", dir.display())));
            }
            Ok(RunSummary::load(&p)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let table = compare_runs(&summaries);
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    fs::write(args.out.join("comparison.txt"), table.to_text())?;
    fs::write(args.out.join("comparison.csv"), table.to_csv())?;
    print!("{}", table.to_text());
    Ok(())
}
