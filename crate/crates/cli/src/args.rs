//! Flag value parsers and argument groups shared by several subcommands.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use swg_core::guidance::{GuidanceConfig, SamplerConfig};
use swg_core::spectral::{Renorm, RenormMode, SelectionMask, Weakener};
use swg_core::toymodel::{HookSet, ModelConfig, Perturbation, WeakOp};

use crate::error::{CliError, CliResult};

/// Retained frequency band written `lo:hi` as fractions of the channel count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
}

impl FromStr for Band {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (lo, hi) = s.split_once(':').ok_or_else(|| format!("`{s}` is not of the form lo:hi"))?;
        let lo: f64 = lo.trim().parse().map_err(|_| format!("`{lo}` is not a number"))?;
        let hi: f64 = hi.trim().parse().map_err(|_| format!("`{hi}` is not a number"))?;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(format!("`{s}` must satisfy 0 <= lo <= hi <= 1"));
        }
        Ok(Self { lo, hi })
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.lo, self.hi)
    }
}

/// Which class label each sample is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassChoice {
    Unconditional,
    Fixed(usize),
    /// Sample `i` uses class `i mod class_count`.
    Cycle,
}

impl FromStr for ClassChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Self::Unconditional),
            "cycle" => Ok(Self::Cycle),
            n => n
                .parse()
                .map(Self::Fixed)
                .map_err(|_| format!("`{s}` is not a class id, `none` or `cycle`")),
        }
    }
}

impl fmt::Display for ClassChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Unconditional => f.write_str("none"),
            Self::Cycle => f.write_str("cycle"),
            Self::Fixed(c) => write!(f, "{c}"),
        }
    }
}

impl ClassChoice {
    pub fn for_sample(self, index: usize, class_count: usize) -> Option<usize> {
        match self {
            Self::Unconditional => None,
            Self::Fixed(c) => Some(c),
            Self::Cycle => Some(index % class_count.max(1)),
        }
    }

    pub fn validate(self, config: &ModelConfig) -> CliResult {
        match self {
            Self::Fixed(c) if c >= config.class_count => Err(CliError::usage(format!(
                "--class: class {c} outside 0..{}",
                config.class_count
            ))),
            Self::Cycle if config.class_count == 0 => Err(CliError::usage("--class: model has no classes")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum WeakKind {
    Spectral,
    Avg,
    Prune,
}

impl fmt::Display for WeakKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeakKind::Spectral => "spectral",
            WeakKind::Avg => "avg",
            WeakKind::Prune => "prune",
        })
    }
}

/// Sampling and weak-branch flags that are not swept.
#[derive(Debug, Clone, Args)]
pub struct CommonGuidance {
    /// How the weak branch degrades its activations.
    #[arg(long, value_enum, default_value_t = WeakKind::Spectral)]
    pub weak: WeakKind,
    /// Renormalization after spectral selection: none, spectral, spatial, unit.
    #[arg(long, default_value = "spectral")]
    pub renorm: Renorm,
    #[arg(long, default_value_t = 1e-8)]
    pub renorm_eps: f64,
    /// Keep the band exactly as written instead of adding conjugate partners.
    #[arg(long)]
    pub no_symmetrize: bool,
    /// Class condition: an id, `none` or `cycle`.
    #[arg(long, default_value = "none")]
    pub class: ClassChoice,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Keep only the k most likely tokens; 0 disables.
    #[arg(long, default_value_t = 0)]
    pub top_k: usize,
    #[arg(long)]
    pub greedy: bool,
    /// Reuse the clean branch's cache for the prompt in the weak branch.
    #[arg(long)]
    pub shared_prefill: bool,
}

impl CommonGuidance {
    pub fn sampler(&self) -> CliResult<SamplerConfig> {
        let s = SamplerConfig {
            temperature: self.temperature,
            top_k: self.top_k,
            greedy: self.greedy,
        };
        s.validate().map_err(|e| CliError::flag("--temperature", e))?;
        Ok(s)
    }

    pub fn mode(&self) -> CliResult<RenormMode> {
        RenormMode::new(self.renorm, self.renorm_eps).map_err(|e| CliError::flag("--renorm-eps", e))
    }

    pub fn perturbation(&self, config: &ModelConfig, hooks: &HookSet, band: Band) -> CliResult<Perturbation> {
        let op = match self.weak {
            WeakKind::Spectral => {
                let mask = SelectionMask::from_range(config.hidden, band.lo, band.hi, !self.no_symmetrize)
                    .map_err(|e| CliError::flag("--retain", e))?;
                WeakOp::Spectral(Weakener::new(mask, self.mode()?).map_err(|e| CliError::flag("--retain", e))?)
            }
            WeakKind::Avg => WeakOp::Average,
            WeakKind::Prune => WeakOp::Prune,
        };
        Ok(Perturbation::new(hooks.clone(), op))
    }

    /// Full guidance settings for one cell; `omega_c == 0` disables CFG.
    pub fn guidance(
        &self,
        config: &ModelConfig,
        hooks: &HookSet,
        band: Band,
        omega_s: f64,
        omega_c: f64,
    ) -> CliResult<GuidanceConfig> {
        self.class.validate(config)?;
        if omega_c > 0.0 && self.class == ClassChoice::Unconditional {
            return Err(CliError::usage(
                "--omega-c: classifier-free guidance needs --class (an id or `cycle`)",
            ));
        }
        let mut g = GuidanceConfig::new(omega_s, self.perturbation(config, hooks, band)?);
        g.omega_c = (omega_c > 0.0).then_some(omega_c);
        g.sampler = self.sampler()?;
        g.shared_prefill = self.shared_prefill;
        Ok(g)
    }

    /// Image tokens per sample: the largest square grid the model's context holds.
    pub fn length(&self, config: &ModelConfig) -> CliResult<usize> {
        let room = config.max_seq.saturating_sub(2);
        let side = (room as f64).sqrt() as usize;
        if side * side != room || side < 4 {
            return Err(CliError::usage(format!(
                "--weights: max_seq {} does not hold a square grid plus two prompt tokens",
                config.max_seq
            )));
        }
        Ok(room)
    }
}

pub fn parse_hooks(flag: &str, spec: &str, config: &ModelConfig) -> CliResult<HookSet> {
    HookSet::parse(spec, config.layers).map_err(|e| CliError::flag(flag, e))
}

pub fn parse_scales(flag: &str, list: &str) -> CliResult<Vec<f64>> {
    let values = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| match s.parse::<f64>() {
            Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
            _ => Err(CliError::usage(format!("{flag}: `{s}` is not a finite value >= 0"))),
        })
        .collect::<CliResult<Vec<_>>>()?;
    if values.is_empty() {
        return Err(CliError::usage(format!("{flag}: list is empty")));
    }
    Ok(values)
}

pub fn parse_bands(flag: &str, list: &str) -> CliResult<Vec<Band>> {
    let bands = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Band>().map_err(|e| CliError::usage(format!("{flag}: {e}"))))
        .collect::<CliResult<Vec<_>>>()?;
    if bands.is_empty() {
        return Err(CliError::usage(format!("{flag}: list is empty")));
    }
    Ok(bands)
}

pub fn require_file(flag: &str, path: &Path) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{flag}: {} does not exist or is not a file", path.display())))
    }
}

/// Output directory, created if missing.
pub fn output_dir(flag: &str, path: &Path) -> CliResult<PathBuf> {
    std::fs::create_dir_all(path).map_err(|e| CliError::usage(format!("{flag}: cannot create {}: {e}", path.display())))?;
    Ok(path.to_path_buf())
}

/// Parent directory of an output file must exist.
pub fn output_file(flag: &str, path: &Path) -> CliResult {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(CliError::usage(format!(
            "{flag}: directory {} does not exist",
            p.display()
        ))),
        _ => Ok(()),
    }
}
