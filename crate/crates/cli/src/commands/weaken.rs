use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use swg_core::spectral::{weaken, FeatureVector, Renorm, RenormMode, SelectionMask};

use super::write_file;
use crate::args::{output_file, require_file, Band};
use crate::error::{CliError, CliResult};

#[derive(Debug, Args)]
pub struct Weaken {
    /// CSV with one real vector per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Retained spectral band, `lo:hi`.
    #[arg(long, default_value = "0:0.1")]
    pub retain: Band,
    #[arg(long, default_value = "spectral")]
    pub renorm: Renorm,
    #[arg(long, default_value_t = 1e-8)]
    pub renorm_eps: f64,
    #[arg(long)]
    pub no_symmetrize: bool,
}

pub fn run(args: &Weaken) -> CliResult {
    require_file("--input", &args.input)?;
    output_file("--out", &args.out)?;
    let mode = RenormMode::new(args.renorm, args.renorm_eps).map_err(|e| CliError::flag("--renorm-eps", e))?;
    let text = std::fs::read_to_string(&args.input).map_err(|e| CliError::file(&args.input, e))?;
    let mut out = String::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| CliError::data(format!("{}: line {}: {msg}", args.input.display(), lineno + 1));
        let values = line
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| at(format!("`{}` is not a number", v.trim()))))
            .collect::<CliResult<Vec<_>>>()?;
        let x = FeatureVector::new(values).map_err(|e| at(e.to_string()))?;
        let mask = SelectionMask::from_range(x.len(), args.retain.lo, args.retain.hi, !args.no_symmetrize)
            .map_err(|e| CliError::flag("--retain", e))?;
        let y = weaken(&x, &mask, mode).map_err(|e| at(e.to_string()))?;
        let row: Vec<String> = y.as_slice().iter().map(f64::to_string).collect();
        writeln!(out, "{}", row.join(",")).expect("writing to a String");
    }
    if out.is_empty() {
        return Err(CliError::data(format!("{}: no vectors found", args.input.display())));
    }
    write_file(&args.out, out.as_bytes())
}
