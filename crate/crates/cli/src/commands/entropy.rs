use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use swg_core::guidance::read_trace_csv;

use super::write_file;
use crate::args::output_file;
use crate::error::{CliError, CliResult};

#[derive(Debug, Args)]
pub struct AnalyzeEntropy {
    /// Directory holding `trace_*.csv` files written by `sample`.
    #[arg(long)]
    pub traces: PathBuf,
    /// CSV of per-step mean and standard deviation of cumulative entropy.
    #[arg(long)]
    pub out: PathBuf,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn run(args: &AnalyzeEntropy) -> CliResult {
    if !args.traces.is_dir() {
        return Err(CliError::usage(format!("--traces: {} is not a directory", args.traces.display())));
    }
    output_file("--out", &args.out)?;
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&args.traces)
        .map_err(|e| CliError::file(&args.traces, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("trace_") && n.ends_with(".csv"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::data(format!("--traces: no trace_*.csv files in {}", args.traces.display())));
    }

    // Cumulative entropies per sample: base[s][t], weak[s][t].
    let mut base = Vec::new();
    let mut weak = Vec::new();
    for path in &paths {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
        let rows = read_trace_csv(&text).map_err(|e| CliError::file(path, e))?;
        let mut cb = 0.0;
        let mut cw = Some(0.0);
        let mut b = Vec::with_capacity(rows.len());
        let mut w = Vec::with_capacity(rows.len());
        for (eb, ew) in rows {
            cb += eb;
            cw = cw.zip(ew).map(|(a, e)| a + e);
            b.push(cb);
            w.push(cw);
        }
        if let Some(first) = base.first().map(Vec::len) {
            if b.len() != first {
                return Err(CliError::file(
                    path,
                    swg_core::Error::DegenerateInput(format!("trace has {} steps, expected {first}", b.len())),
                ));
            }
        }
        base.push(b);
        weak.push(w);
    }

    let steps = base[0].len();
    let mut csv = String::from("step,n,base_mean,base_std,perturbed_mean,perturbed_std\n");
    for t in 0..steps {
        let b: Vec<f64> = base.iter().map(|s| s[t]).collect();
        let w: Option<Vec<f64>> = weak.iter().map(|s| s[t]).collect();
        let (bm, bs) = mean_std(&b);
        let (wm, ws) = match w {
            Some(w) => {
                let (m, s) = mean_std(&w);
                (m.to_string(), s.to_string())
            }
            None => (String::new(), String::new()),
        };
        writeln!(csv, "{t},{},{bm},{bs},{wm},{ws}", b.len()).expect("writing to a String");
    }
    write_file(&args.out, csv.as_bytes())
}
