use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use rayon::prelude::*;
use swg_core::guidance::GuidanceConfig;
use swg_core::toymodel::HookSet;

use super::sample::{draw, hooks_field, Outcome, Tally, METRICS_HEADER};
use super::{load_weights, write_file};
use crate::args::{output_file, parse_bands, parse_hooks, parse_scales, Band, CommonGuidance};
use crate::error::{CliError, CliResult};

#[derive(Debug, Args)]
pub struct Sweep {
    #[arg(long)]
    pub weights: PathBuf,
    /// Samples per grid cell.
    #[arg(long, default_value_t = 256)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Metrics CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma list of SWG scales.
    #[arg(long, default_value = "0,1,2,3,4")]
    pub omega_s: String,
    /// Comma list of CFG scales; 0 disables CFG for that cell.
    #[arg(long, default_value = "0")]
    pub omega_c: String,
    /// Comma list of retained bands, e.g. `0:0.1,0:0.9`.
    #[arg(long, default_value = "0:0.1")]
    pub retain: String,
    /// Hook sets separated by `;`, e.g. `all.v;0.q,0.k`.
    #[arg(long, default_value = "all.v")]
    pub hooks: String,
    #[command(flatten)]
    pub common: CommonGuidance,
}

struct Cell {
    omega_s: f64,
    omega_c: f64,
    band: Band,
    hooks: HookSet,
    guidance: GuidanceConfig,
}

/// Worker count: `SWG_THREADS` when set, otherwise every available core.
fn thread_count() -> CliResult<usize> {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var("SWG_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::usage(format!("SWG_THREADS: `{v}` is not a positive integer"))),
        },
        Err(_) => Ok(available),
    }
}

pub fn run(args: &Sweep) -> CliResult {
    if args.n == 0 {
        return Err(CliError::usage("--n must be positive"));
    }
    let omega_s = parse_scales("--omega-s", &args.omega_s)?;
    let omega_c = parse_scales("--omega-c", &args.omega_c)?;
    let bands = parse_bands("--retain", &args.retain)?;
    output_file("--out", &args.out)?;
    let weights = load_weights("--weights", &args.weights)?;
    let config = *weights.config();
    let hook_sets = args
        .hooks
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|spec| parse_hooks("--hooks", spec, &config))
        .collect::<CliResult<Vec<_>>>()?;
    if hook_sets.is_empty() {
        return Err(CliError::usage("--hooks: list is empty"));
    }
    let length = args.common.length(&config)?;

    let mut cells = Vec::new();
    for hooks in &hook_sets {
        for &band in &bands {
            for &wc in &omega_c {
                for &ws in &omega_s {
                    cells.push(Cell {
                        omega_s: ws,
                        omega_c: wc,
                        band,
                        hooks: hooks.clone(),
                        guidance: args.common.guidance(&config, hooks, band, ws, wc)?,
                    });
                }
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count()?)
        .build()
        .map_err(|e| CliError::usage(format!("SWG_THREADS: {e}")))?;
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..args.n).map(move |i| (c, i))).collect();
    let outcomes: Vec<Outcome> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, i)| {
                draw(&weights, &cells[c].guidance, args.common.class, i, args.seed, length).map(|d| Outcome::from(&d))
            })
            .collect::<CliResult<Vec<_>>>()
    })?;

    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    for (c, cell) in cells.iter().enumerate() {
        let mut tally = Tally::default();
        for o in &outcomes[c * args.n..(c + 1) * args.n] {
            tally.add(o);
        }
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            cell.omega_s,
            cell.omega_c,
            cell.band,
            hooks_field(&cell.hooks),
            args.common.weak,
            args.common.renorm,
            args.common.class,
            tally.csv_fields()
        )
        .expect("writing to a String");
        eprintln!(
            "omega_s={} omega_c={} retain={} hooks={}: validity {:.3}, valid+class {:.3}",
            cell.omega_s,
            cell.omega_c,
            cell.band,
            cell.hooks,
            tally.validity_rate(),
            tally.valid_and_match_rate()
        );
    }
    write_file(&args.out, csv.as_bytes())
}
