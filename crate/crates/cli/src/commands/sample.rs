use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use swg_core::dataset::{self, render_pgm, TokenGrid, ValidityReport};
use swg_core::guidance::{self, GuidanceConfig, Generation};
use swg_core::seed::{self, streams};
use swg_core::toymodel::{HookSet, ModelWeights};

use super::{corpus_bytes, load_weights, write_file};
use crate::args::{output_dir, parse_hooks, Band, ClassChoice, CommonGuidance};
use crate::error::{CliError, CliResult};

#[derive(Debug, Args)]
pub struct Sample {
    #[arg(long)]
    pub weights: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for samples, renders, traces and the summary.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub omega_s: f64,
    /// CFG scale; 0 disables the unconditional branch.
    #[arg(long, default_value_t = 0.0)]
    pub omega_c: f64,
    /// Retained spectral band as fractions, `lo:hi`.
    #[arg(long, default_value = "0:0.1")]
    pub retain: Band,
    /// Hooked sites, e.g. `all.v` or `0.v,1.k`.
    #[arg(long, default_value = "all.v")]
    pub hooks: String,
    #[command(flatten)]
    pub common: CommonGuidance,
    /// Also write each trace as JSON with full logits.
    #[arg(long)]
    pub trace_json: bool,
    /// Pixels per token edge in renders.
    #[arg(long, default_value_t = 8)]
    pub scale: usize,
}

/// One finished sample.
pub struct Drawn {
    pub generation: Generation,
    pub grid: TokenGrid,
    pub report: ValidityReport,
}

/// Sample `index` of a run rooted at `root_seed`. Every command derives the
/// per-sample seed the same way, so equal settings give equal samples.
pub fn draw(
    weights: &ModelWeights,
    template: &GuidanceConfig,
    class: ClassChoice,
    index: usize,
    root_seed: u64,
    length: usize,
) -> CliResult<Drawn> {
    let mut cfg = template.clone();
    cfg.condition = class.for_sample(index, weights.config().class_count);
    let seed = seed::derive(root_seed, streams::SAMPLE, index as u64);
    let generation = guidance::generate(weights, &cfg, length, seed).map_err(|e| CliError::flag("--weights", e))?;
    let side = (length as f64).sqrt().round() as usize;
    let grid = TokenGrid::new(side, generation.tokens.clone(), cfg.condition).map_err(|e| CliError::flag("--weights", e))?;
    let report = dataset::validity(&grid);
    Ok(Drawn { generation, grid, report })
}

impl Drawn {
    /// Cumulative weak-minus-clean entropy at the final step, when the weak branch ran.
    pub fn entropy_gap(&self) -> Option<f64> {
        let base: f64 = self.generation.trace.iter().map(|t| t.base_entropy).sum();
        let weak: Option<f64> = self.generation.trace.iter().map(|t| t.perturbed_entropy).sum();
        weak.map(|w| w - base)
    }
}

/// What a sweep keeps of each sample.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: ValidityReport,
    pub entropy_gap: Option<f64>,
}

impl From<&Drawn> for Outcome {
    fn from(d: &Drawn) -> Self {
        Self {
            report: d.report.clone(),
            entropy_gap: d.entropy_gap(),
        }
    }
}

/// Running totals over the samples of one configuration.
#[derive(Debug, Default, Clone)]
pub struct Tally {
    pub n: usize,
    pub scored: usize,
    pub valid: usize,
    pub conditioned: usize,
    pub class_match: usize,
    pub valid_and_match: usize,
    pub score: f64,
    pub entropy_gap: f64,
    pub gap_count: usize,
}

impl Tally {
    pub fn add(&mut self, o: &Outcome) {
        self.n += 1;
        let r = &o.report;
        self.scored += 1;
        self.valid += r.valid as usize;
        self.score += r.score;
        if let Some(m) = r.class_match {
            self.conditioned += 1;
            self.class_match += m as usize;
        }
        self.valid_and_match += (r.valid && r.class_match.unwrap_or(true)) as usize;
        if let Some(gap) = o.entropy_gap {
            self.entropy_gap += gap;
            self.gap_count += 1;
        }
    }

    fn rate(count: usize, total: usize) -> String {
        if total == 0 {
            String::new()
        } else {
            (count as f64 / total as f64).to_string()
        }
    }

    pub fn validity_rate(&self) -> f64 {
        self.valid as f64 / self.scored.max(1) as f64
    }

    pub fn valid_and_match_rate(&self) -> f64 {
        self.valid_and_match as f64 / self.scored.max(1) as f64
    }

    /// `n,validity_rate,class_match_rate,valid_match_rate,mean_score,mean_final_entropy_gap`
    pub fn csv_fields(&self) -> String {
        let mean_score = if self.scored == 0 {
            String::new()
        } else {
            (self.score / self.scored as f64).to_string()
        };
        let gap = if self.gap_count == 0 {
            String::new()
        } else {
            (self.entropy_gap / self.gap_count as f64).to_string()
        };
        format!(
            "{},{},{},{},{},{}",
            self.n,
            Self::rate(self.valid, self.scored),
            Self::rate(self.class_match, self.conditioned),
            Self::rate(self.valid_and_match, self.scored),
            mean_score,
            gap
        )
    }
}

/// Hook list for a CSV cell; the parser accepts `+` as a separator.
pub fn hooks_field(hooks: &HookSet) -> String {
    hooks.to_string().replace(',', "+")
}

pub const METRICS_HEADER: &str = "omega_s,omega_c,retention,hooks,weak,renorm,class,n,validity_rate,class_match_rate,valid_match_rate,mean_score,mean_final_entropy_gap";

pub fn run(args: &Sample) -> CliResult {
    if args.n == 0 {
        return Err(CliError::usage("--n must be positive"));
    }
    let weights = load_weights("--weights", &args.weights)?;
    let config = *weights.config();
    let hooks = parse_hooks("--hooks", &args.hooks, &config)?;
    if !(args.omega_s >= 0.0 && args.omega_s.is_finite()) {
        return Err(CliError::usage("--omega-s must be a finite value >= 0"));
    }
    if !(args.omega_c >= 0.0 && args.omega_c.is_finite()) {
        return Err(CliError::usage("--omega-c must be a finite value >= 0"));
    }
    let template = args.common.guidance(&config, &hooks, args.retain, args.omega_s, args.omega_c)?;
    let length = args.common.length(&config)?;
    let dir = output_dir("--out", &args.out)?;

    let mut tally = Tally::default();
    let mut grids = Vec::with_capacity(args.n);
    for i in 0..args.n {
        let d = draw(&weights, &template, args.common.class, i, args.seed, length)?;
        tally.add(&Outcome::from(&d));
        write_file(&dir.join(format!("trace_{i:04}.csv")), guidance::trace_to_csv(&d.generation.trace).as_bytes())?;
        if args.trace_json {
            write_file(&dir.join(format!("trace_{i:04}.json")), guidance::trace_to_json(&d.generation.trace).as_bytes())?;
        }
        write_file(&dir.join(format!("sample_{i:04}.pgm")), &render_pgm(&d.grid, args.scale))?;
        grids.push(d.grid);
    }
    write_file(&dir.join("samples.csv"), &corpus_bytes(&grids))?;
    let mut summary = String::from(METRICS_HEADER);
    summary.push('\n');
    writeln!(
        summary,
        "{},{},{},{},{},{},{},{}",
        args.omega_s,
        args.omega_c,
        args.retain,
        hooks_field(&hooks),
        args.common.weak,
        args.common.renorm,
        args.common.class,
        tally.csv_fields()
    )
    .expect("writing to a String");
    write_file(&dir.join("summary.csv"), summary.as_bytes())?;
    eprintln!(
        "{} samples, validity {:.3}, valid+class {:.3}",
        tally.n,
        tally.validity_rate(),
        tally.valid_and_match_rate()
    );
    Ok(())
}
