//! Small decoder-only transformer over grid tokens.
//!
//! Pre-norm blocks with learned positional embeddings and an output head tied
//! to the token embedding. Sequences look like
//! `[BOS, class, t0, t1, ...]` where `class` is one of `class_count` labels or
//! the reserved null class used by the unconditional branch.
//!
//! Inference runs one token at a time against a [`KvCache`]. A
//! [`Perturbation`] names the activations to weaken and how.

mod infer;
mod io;
mod ops;
mod params;
mod train;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::spectral::Weakener;

pub use infer::{forward_recompute, forward_step, forward_step_traced, KvCache};
pub use io::{load_weights, read_weights, save_weights, write_weights, FORMAT_VERSION, MAGIC};
pub use params::ModelWeights;
pub use train::{corpus_loss, sequence_log_likelihood, train, train_with_progress, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_seq: usize,
    pub class_count: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            hidden: 64,
            heads: 4,
            layers: 4,
            max_seq: 66,
            class_count: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.hidden == 0 || self.heads == 0 || self.layers == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if !self.hidden.is_multiple_of(2) {
            return Err(Error::invalid(format!("hidden size {} must be even", self.hidden)));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.max_seq < 2 {
            return Err(Error::invalid("max_seq must be at least 2"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn bos_token(&self) -> u32 {
        self.vocab_size as u32
    }

    /// Token for a class label; `None` selects the null class.
    pub fn class_token(&self, class_id: Option<usize>) -> u32 {
        let c = class_id.unwrap_or(self.class_count);
        (self.vocab_size + 1 + c) as u32
    }

    pub fn null_class_token(&self) -> u32 {
        self.class_token(None)
    }

    /// Image tokens, BOS, the class tokens and the null class.
    pub fn embedding_rows(&self) -> usize {
        self.vocab_size + 2 + self.class_count
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.read_into("vocab_size", &mut self.vocab_size)?;
        kv.read_into("hidden", &mut self.hidden)?;
        kv.read_into("heads", &mut self.heads)?;
        kv.read_into("layers", &mut self.layers)?;
        kv.read_into("max_seq", &mut self.max_seq)?;
        kv.read_into("class_count", &mut self.class_count)?;
        self.validate()
    }
}

/// Named activation inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Site {
    Query,
    Key,
    Value,
    AttnOut,
    MlpOut,
    Residual,
}

impl Site {
    pub const ALL: [Site; 6] = [Site::Query, Site::Key, Site::Value, Site::AttnOut, Site::MlpOut, Site::Residual];

    pub fn letter(self) -> char {
        match self {
            Site::Query => 'q',
            Site::Key => 'k',
            Site::Value => 'v',
            Site::AttnOut => 'a',
            Site::MlpOut => 'm',
            Site::Residual => 'r',
        }
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q" | "query" => Ok(Site::Query),
            "k" | "key" => Ok(Site::Key),
            "v" | "value" => Ok(Site::Value),
            "a" | "attn" => Ok(Site::AttnOut),
            "m" | "mlp" => Ok(Site::MlpOut),
            "r" | "residual" => Ok(Site::Residual),
            other => Err(Error::invalid(format!("unknown hook site `{other}` (expected q,k,v,a,m,r)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HookSite {
    pub layer: usize,
    pub site: Site,
}

impl HookSite {
    pub fn new(layer: usize, site: Site) -> Self {
        Self { layer, site }
    }
}

impl fmt::Display for HookSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.layer, self.site.letter())
    }
}

/// Set of hooked sites, written as lists like `0.v,1.v,2.q` (`+` also
/// separates items, which keeps the list inside one CSV field).
///
/// `all.v` expands to the value site of every layer once the layer count is
/// known (see [`HookSet::parse`]).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HookSet(BTreeSet<HookSite>);

impl HookSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn all_layers(layers: usize, site: Site) -> Self {
        Self((0..layers).map(|l| HookSite::new(l, site)).collect())
    }

    pub fn parse(spec: &str, layers: usize) -> Result<Self> {
        let mut set = BTreeSet::new();
        for item in spec.split([',', '+']).map(str::trim).filter(|s| !s.is_empty()) {
            let (layer, site) = item
                .split_once('.')
                .ok_or_else(|| Error::invalid(format!("hook `{item}` must look like LAYER.SITE")))?;
            let site: Site = site.parse()?;
            if layer == "all" {
                set.extend((0..layers).map(|l| HookSite::new(l, site)));
                continue;
            }
            let layer: usize = layer
                .parse()
                .map_err(|_| Error::invalid(format!("hook `{item}` has a bad layer index")))?;
            if layer >= layers {
                return Err(Error::invalid(format!("hook `{item}` refers to layer {layer}, model has {layers}")));
            }
            set.insert(HookSite::new(layer, site));
        }
        Ok(Self(set))
    }

    pub fn insert(&mut self, hook: HookSite) {
        self.0.insert(hook);
    }

    pub fn contains(&self, layer: usize, site: Site) -> bool {
        self.0.contains(&HookSite::new(layer, site))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &HookSite> {
        self.0.iter()
    }

    pub fn max_layer(&self) -> Option<usize> {
        self.0.iter().map(|h| h.layer).max()
    }
}

impl fmt::Display for HookSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromIterator<HookSite> for HookSet {
    fn from_iter<I: IntoIterator<Item = HookSite>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// How a hooked activation is degraded.
#[derive(Debug, Clone)]
pub enum WeakOp {
    /// Spectral selection with optional renormalization.
    Spectral(Weakener),
    /// Every channel replaced by the channel mean.
    Average,
    /// Activation zeroed, which removes the sublayer for `AttnOut`/`MlpOut`.
    Prune,
}

impl WeakOp {
    pub fn apply(&self, x: &mut [f32]) {
        match self {
            WeakOp::Spectral(w) => w.apply_f32(x),
            WeakOp::Average => {
                let mean = x.iter().sum::<f32>() / x.len() as f32;
                x.fill(mean);
            }
            WeakOp::Prune => x.fill(0.0),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WeakOp::Spectral(_) => "spectral",
            WeakOp::Average => "avg",
            WeakOp::Prune => "prune",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Perturbation {
    pub hooks: HookSet,
    pub op: WeakOp,
}

impl Perturbation {
    pub fn new(hooks: HookSet, op: WeakOp) -> Self {
        Self { hooks, op }
    }

    pub fn spectral(hooks: HookSet, weakener: Weakener) -> Self {
        Self::new(hooks, WeakOp::Spectral(weakener))
    }

    pub(crate) fn hook(&self, layer: usize, site: Site, x: &mut [f32]) {
        if self.hooks.contains(layer, site) {
            self.op.apply(x);
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if let Some(layer) = self.hooks.max_layer() {
            if layer >= config.layers {
                return Err(Error::invalid(format!("hook on layer {layer}, model has {}", config.layers)));
            }
        }
        if let WeakOp::Spectral(w) = &self.op {
            if w.channels() != config.hidden {
                return Err(Error::invalid(format!(
                    "mask length {} does not match hidden size {}",
                    w.channels(),
                    config.hidden
                )));
            }
        }
        Ok(())
    }
}

/// Applies the perturbation when present.
pub(crate) fn hook(p: Option<&Perturbation>, layer: usize, site: Site, x: &mut [f32]) {
    if let Some(p) = p {
        p.hook(layer, site, x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hook_set_parsing() {
        let h = HookSet::parse("0.v,1.v,2.q", 4).unwrap();
        assert!(h.contains(0, Site::Value) && h.contains(2, Site::Query));
        assert!(!h.contains(2, Site::Value));
        assert_eq!(h.to_string(), "0.v,1.v,2.q");
        assert_eq!(HookSet::parse("all.v", 3).unwrap(), HookSet::all_layers(3, Site::Value));
        assert!(HookSet::parse("4.v", 4).is_err());
        assert!(HookSet::parse("0.x", 4).is_err());
        assert!(HookSet::parse("v", 4).is_err());
        assert!(HookSet::parse("", 4).unwrap().is_empty());
    }

    #[test]
    fn config_validation() {
        ModelConfig::default().validate().unwrap();
        let bad = ModelConfig { heads: 3, ..Default::default() };
        assert!(bad.validate().is_err());
        let odd = ModelConfig { hidden: 63, heads: 1, ..Default::default() };
        assert!(odd.validate().is_err());
        let c = ModelConfig::default();
        assert_eq!(c.bos_token(), 64);
        assert_eq!(c.class_token(Some(0)), 65);
        assert_eq!(c.null_class_token(), 73);
        assert_eq!(c.embedding_rows(), 74);
    }

    #[test]
    fn weak_ops() {
        let mut x = [1.0f32, 2.0, 3.0, 6.0];
        WeakOp::Average.apply(&mut x);
        assert_eq!(x, [3.0; 4]);
        WeakOp::Prune.apply(&mut x);
        assert_eq!(x, [0.0; 4]);
    }
}
