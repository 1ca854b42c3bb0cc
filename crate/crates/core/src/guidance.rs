//! Guided sampling: a clean branch, a weakened branch and an optional
//! unconditional branch decode in lockstep, their logits are blended, and one
//! token is sampled and fed to every branch.
//!
//! Sampling order is fixed: each step draws exactly one `f64` uniform from the
//! generator (none when greedy), then inverts the CDF over token ids in
//! ascending order. The generator is ChaCha20 seeded with the `seed` argument
//! of [`generate`].

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{RenormMode, SelectionMask, Weakener};
use crate::toymodel::{forward_step, HookSet, KvCache, ModelWeights, Perturbation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    /// Keep only the `top_k` largest logits; 0 keeps all.
    pub top_k: usize,
    /// Always take the arg-max instead of sampling.
    pub greedy: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 0,
            greedy: false,
        }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self {
            greedy: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }

    /// Temperature at which entropies are reported; greedy decoding uses 1.
    pub fn entropy_temperature(&self) -> f64 {
        if self.greedy {
            1.0
        } else {
            self.temperature
        }
    }
}

#[derive(Debug, Clone)]
pub struct GuidanceConfig {
    pub omega_s: f64,
    /// CFG scale; `None` disables the unconditional branch.
    pub omega_c: Option<f64>,
    /// What the weak branch does to its activations.
    pub perturbation: Perturbation,
    pub sampler: SamplerConfig,
    /// Class label, or `None` for unconditional generation.
    pub condition: Option<usize>,
    /// Let the weak branch reuse the clean branch's cache for the prompt
    /// instead of prefilling it with hooks active.
    pub shared_prefill: bool,
    /// Do not run the weak branch when `omega_s` is 0. Its trace fields are then empty.
    pub skip_idle_branches: bool,
}

impl GuidanceConfig {
    /// Spectral weakening with default sampling and no CFG.
    pub fn spectral(omega_s: f64, mask: SelectionMask, mode: RenormMode, hooks: HookSet) -> Result<Self> {
        Ok(Self::new(omega_s, Perturbation::spectral(hooks, Weakener::new(mask, mode)?)))
    }

    pub fn new(omega_s: f64, perturbation: Perturbation) -> Self {
        Self {
            omega_s,
            omega_c: None,
            perturbation,
            sampler: SamplerConfig::default(),
            condition: None,
            shared_prefill: false,
            skip_idle_branches: false,
        }
    }

    pub fn validate(&self, weights: &ModelWeights) -> Result<()> {
        let config = weights.config();
        if !(self.omega_s >= 0.0 && self.omega_s.is_finite()) {
            return Err(Error::invalid(format!("omega_s must be a finite value >= 0, got {}", self.omega_s)));
        }
        if let Some(wc) = self.omega_c {
            if !(wc >= 0.0 && wc.is_finite()) {
                return Err(Error::invalid(format!("omega_c must be a finite value >= 0, got {wc}")));
            }
            if self.condition.is_none() {
                return Err(Error::invalid("classifier-free guidance needs a class condition"));
            }
        }
        if let Some(c) = self.condition {
            if c >= config.class_count {
                return Err(Error::invalid(format!("class {c} outside 0..{}", config.class_count)));
            }
        }
        self.sampler.validate()?;
        self.perturbation.validate(config)
    }
}

/// Everything computed at one decoding step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub base_logits: Vec<f64>,
    pub perturbed_logits: Option<Vec<f64>>,
    pub uncond_logits: Option<Vec<f64>>,
    pub blended_logits: Vec<f64>,
    pub sampled_token: u32,
    pub base_entropy: f64,
    pub perturbed_entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub trace: Vec<StepTrace>,
}

/// `z_c + ω_s (z_c − z_p)`, followed by `+ ω_c (z_c − z_b)` when an
/// unconditional prediction is given.
pub fn blend(z_c: &[f64], z_p: &[f64], z_b: Option<&[f64]>, omega_s: f64, omega_c: f64) -> Result<Vec<f64>> {
    if z_p.len() != z_c.len() || z_b.is_some_and(|b| b.len() != z_c.len()) {
        return Err(Error::invalid("blend: logit vectors differ in length"));
    }
    let mut z: Vec<f64> = z_c.iter().zip(z_p).map(|(c, p)| c + omega_s * (c - p)).collect();
    if let Some(z_b) = z_b {
        for ((z, c), b) in z.iter_mut().zip(z_c).zip(z_b) {
            *z += omega_c * (c - b);
        }
    }
    Ok(z)
}

/// Shannon entropy (nats) of `softmax(logits / temperature)`.
pub fn entropy(logits: &[f64], temperature: f64) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let h: f64 = weights
        .iter()
        .zip(&scaled)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, s)| w / total * (total.ln() - (s - max)))
        .sum();
    h.clamp(0.0, (logits.len() as f64).ln())
}

/// Draws a token from `logits` under `sampler`.
pub fn sample_token<R: Rng + ?Sized>(logits: &[f64], sampler: &SamplerConfig, rng: &mut R) -> usize {
    let argmax = || {
        logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    };
    if sampler.greedy {
        return argmax();
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / sampler.temperature).collect();
    let mut keep = vec![true; scaled.len()];
    if sampler.top_k > 0 && sampler.top_k < scaled.len() {
        let mut order: Vec<usize> = (0..scaled.len()).collect();
        order.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]).then(a.cmp(&b)));
        keep.fill(false);
        for &i in &order[..sampler.top_k] {
            keep[i] = true;
        }
    }
    let max = scaled
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled
        .iter()
        .zip(&keep)
        .map(|(s, &k)| if k { (s - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = argmax();
    for (i, w) in weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

fn widen(logits: Vec<f32>) -> Vec<f64> {
    logits.into_iter().map(f64::from).collect()
}

/// Prefills `cache` with `prefix` and returns the logits after the last token.
fn prefill(
    weights: &ModelWeights,
    cache: &mut KvCache,
    prefix: &[u32],
    perturb: Option<&Perturbation>,
) -> Result<Vec<f32>> {
    let mut logits = Vec::new();
    for &t in prefix {
        logits = forward_step(weights, cache, t, perturb)?;
    }
    Ok(logits)
}

/// Samples `length` image tokens with guidance.
///
/// The prompt is `[BOS, class]` (the null class when unconditional). The clean
/// and weak branches each keep a cache; a third cache holds the unconditional
/// branch when `omega_c` is set.
pub fn generate(weights: &ModelWeights, cfg: &GuidanceConfig, length: usize, seed: u64) -> Result<Generation> {
    cfg.validate(weights)?;
    let model = weights.config();
    let prefix = [model.bos_token(), model.class_token(cfg.condition)];
    if prefix.len() + length > model.max_seq {
        return Err(Error::SequenceTooLong {
            position: prefix.len() + length - 1,
            max_seq: model.max_seq,
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let perturb = Some(&cfg.perturbation);
    let run_weak = !(cfg.skip_idle_branches && cfg.omega_s == 0.0);

    let mut base_cache = KvCache::new(model);
    let mut weak_cache = KvCache::new(model);
    let mut uncond_cache = KvCache::new(model);

    prefill(weights, &mut base_cache, &prefix[..1], None)?;
    let mut z_p = Vec::new();
    if run_weak {
        if cfg.shared_prefill {
            weak_cache = base_cache.clone();
            z_p = prefill(weights, &mut weak_cache, &prefix[1..], perturb)?;
        } else {
            z_p = prefill(weights, &mut weak_cache, &prefix, perturb)?;
        }
    }
    let mut z_c = prefill(weights, &mut base_cache, &prefix[1..], None)?;
    let mut z_b = match cfg.omega_c {
        Some(_) => prefill(weights, &mut uncond_cache, &[model.bos_token(), model.null_class_token()], None)?,
        None => Vec::new(),
    };

    let temp = cfg.sampler.entropy_temperature();
    let mut tokens = Vec::with_capacity(length);
    let mut trace = Vec::with_capacity(length);
    for step in 0..length {
        let base = widen(std::mem::take(&mut z_c));
        let weak = run_weak.then(|| widen(std::mem::take(&mut z_p)));
        let uncond = cfg.omega_c.map(|_| widen(std::mem::take(&mut z_b)));

        let blended = match (&weak, &uncond) {
            (None, None) => base.clone(),
            _ if cfg.omega_s == 0.0 && uncond.is_none() => base.clone(),
            _ => blend(
                &base,
                weak.as_deref().unwrap_or(&base),
                uncond.as_deref(),
                cfg.omega_s,
                cfg.omega_c.unwrap_or(0.0),
            )?,
        };
        let token = sample_token(&blended, &cfg.sampler, &mut rng) as u32;
        tokens.push(token);
        trace.push(StepTrace {
            step,
            base_entropy: entropy(&base, temp),
            perturbed_entropy: weak.as_deref().map(|w| entropy(w, temp)),
            base_logits: base,
            perturbed_logits: weak,
            uncond_logits: uncond,
            blended_logits: blended,
            sampled_token: token,
        });

        if step + 1 < length {
            z_c = forward_step(weights, &mut base_cache, token, None)?;
            if run_weak {
                z_p = forward_step(weights, &mut weak_cache, token, perturb)?;
            }
            if cfg.omega_c.is_some() {
                z_b = forward_step(weights, &mut uncond_cache, token, None)?;
            }
        }
    }
    debug_assert!(!run_weak || weak_cache.len() == base_cache.len());
    debug_assert!(cfg.omega_c.is_none() || uncond_cache.len() == base_cache.len());
    Ok(Generation { tokens, trace })
}

pub const TRACE_CSV_HEADER: &str = "step,base_entropy,perturbed_entropy,sampled_token";

/// One row per step; an idle weak branch leaves `perturbed_entropy` empty.
pub fn trace_to_csv(trace: &[StepTrace]) -> String {
    let mut out = String::from(TRACE_CSV_HEADER);
    out.push('\n');
    for t in trace {
        let pe = t.perturbed_entropy.map(|e| e.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", t.step, t.base_entropy, pe, t.sampled_token).expect("writing to a String");
    }
    out
}

pub fn trace_to_json(trace: &[StepTrace]) -> String {
    serde_json::to_string(trace).expect("traces serialize")
}

/// `(base_entropy, perturbed_entropy)` per step from a trace CSV.
pub fn read_trace_csv(text: &str) -> Result<Vec<(f64, Option<f64>)>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == TRACE_CSV_HEADER => {}
        _ => return Err(Error::format("header", format!("expected `{TRACE_CSV_HEADER}`"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let at = || format!("line {}", i + 2);
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(Error::format(at(), format!("expected 4 columns, found {}", cols.len())));
        }
        let step: usize = cols[0].parse().map_err(|_| Error::format(at(), "bad step"))?;
        if step != rows.len() {
            return Err(Error::format(at(), format!("expected step {}, found {step}", rows.len())));
        }
        let base: f64 = cols[1].parse().map_err(|_| Error::format(at(), "bad base_entropy"))?;
        let weak = match cols[2] {
            "" => None,
            s => Some(s.parse::<f64>().map_err(|_| Error::format(at(), "bad perturbed_entropy"))?),
        };
        rows.push((base, weak));
    }
    Ok(rows)
}
