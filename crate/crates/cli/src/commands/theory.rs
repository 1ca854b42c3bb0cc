use std::path::PathBuf;

use clap::Args;
use swg_core::infotheory::{verify_theory, TheoryRun};

use super::write_file;
use crate::args::output_file;
use crate::error::{CliError, CliResult};

#[derive(Debug, Args)]
pub struct VerifyTheory {
    #[arg(long, default_value_t = 16)]
    pub dim_x: usize,
    #[arg(long, default_value_t = 4)]
    pub dim_z: usize,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Retained rank of the random masks; defaults to dim_x / 4 (at least 1).
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report to write.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: &VerifyTheory) -> CliResult {
    output_file("--out", &args.out)?;
    let run = TheoryRun {
        dim_x: args.dim_x,
        dim_z: args.dim_z,
        trials: args.trials,
        rank: args.rank.unwrap_or((args.dim_x / 4).max(1)),
        seed: args.seed,
    };
    let report = verify_theory(run).map_err(|e| {
        let flag = if args.rank.is_some_and(|r| r > args.dim_x) { "--rank" } else { "--dim-x/--dim-z/--trials" };
        CliError::flag(flag, e)
    })?;
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    write_file(&args.out, json.as_bytes())?;
    eprintln!(
        "{} trials: {} information violations, {} invariance violations (max error {:.2e}), {} strict",
        run.trials, report.violations, report.invariance_violations, report.max_invariance_error, report.strict
    );
    Ok(())
}
