use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Span {
    pub offset: usize,
    pub len: usize,
}

impl Span {
    pub fn of<'a>(&self, data: &'a [f32]) -> &'a [f32] {
        &data[self.offset..self.offset + self.len]
    }

    pub fn of_mut<'a>(&self, data: &'a mut [f32]) -> &'a mut [f32] {
        &mut data[self.offset..self.offset + self.len]
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerSpans {
    pub ln1_g: Span,
    pub ln1_b: Span,
    pub wq: Span,
    pub wk: Span,
    pub wv: Span,
    pub wo: Span,
    pub ln2_g: Span,
    pub ln2_b: Span,
    pub w1: Span,
    pub b1: Span,
    pub w2: Span,
    pub b2: Span,
}

#[derive(Debug, Clone)]
pub(crate) struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub span: Span,
}

/// Where every named tensor lives inside the flat parameter buffer.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub tok_emb: Span,
    pub pos_emb: Span,
    pub layers: Vec<LayerSpans>,
    pub lnf_g: Span,
    pub lnf_b: Span,
    pub entries: Vec<TensorEntry>,
    pub total: usize,
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        let c = config.hidden;
        let mut entries = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let len = shape.iter().product();
            let span = Span { offset: total, len };
            total += len;
            entries.push(TensorEntry { name, shape, span });
            span
        };
        let tok_emb = add("tok_emb".into(), vec![config.embedding_rows(), c]);
        let pos_emb = add("pos_emb".into(), vec![config.max_seq, c]);
        let layers = (0..config.layers)
            .map(|l| {
                let p = |s: &str| format!("layers.{l}.{s}");
                LayerSpans {
                    ln1_g: add(p("ln1.gain"), vec![c]),
                    ln1_b: add(p("ln1.bias"), vec![c]),
                    wq: add(p("attn.wq"), vec![c, c]),
                    wk: add(p("attn.wk"), vec![c, c]),
                    wv: add(p("attn.wv"), vec![c, c]),
                    wo: add(p("attn.wo"), vec![c, c]),
                    ln2_g: add(p("ln2.gain"), vec![c]),
                    ln2_b: add(p("ln2.bias"), vec![c]),
                    w1: add(p("mlp.w1"), vec![c, 4 * c]),
                    b1: add(p("mlp.b1"), vec![4 * c]),
                    w2: add(p("mlp.w2"), vec![4 * c, c]),
                    b2: add(p("mlp.b2"), vec![c]),
                }
            })
            .collect();
        let lnf_g = add("ln_f.gain".into(), vec![c]);
        let lnf_b = add("ln_f.bias".into(), vec![c]);
        Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            entries,
            total,
        }
    }
}

/// Immutable model parameters, stored as one flat `f32` buffer.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub(crate) config: ModelConfig,
    pub(crate) layout: Layout,
    pub(crate) data: Vec<f32>,
}

impl PartialEq for ModelWeights {
    /// Bitwise comparison of every parameter.
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl ModelWeights {
    /// Gaussian init with `init_std` for matrices and embeddings; output
    /// projections are scaled down by `sqrt(2·layers)`; norms start at identity.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, init_std: f32, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut data = vec![0.0f32; layout.total];
        let normal = Normal::new(0.0f32, init_std).map_err(|e| Error::invalid(format!("init_std: {e}")))?;
        let proj = Normal::new(0.0f32, init_std / (2.0 * config.layers as f32).sqrt())
            .map_err(|e| Error::invalid(format!("init_std: {e}")))?;
        let mut fill = |span: Span, dist: &Normal<f32>, data: &mut [f32]| {
            for v in span.of_mut(data) {
                *v = dist.sample(rng);
            }
        };
        fill(layout.tok_emb, &normal, &mut data);
        fill(layout.pos_emb, &normal, &mut data);
        for l in &layout.layers {
            for s in [l.wq, l.wk, l.wv, l.w1] {
                fill(s, &normal, &mut data);
            }
            for s in [l.wo, l.w2] {
                fill(s, &proj, &mut data);
            }
            l.ln1_g.of_mut(&mut data).fill(1.0);
            l.ln2_g.of_mut(&mut data).fill(1.0);
        }
        layout.lnf_g.of_mut(&mut data).fill(1.0);
        Ok(Self { config, layout, data })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.data.len()
    }

    /// `(name, shape, values)` for every tensor in storage order.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &[usize], &[f32])> {
        self.layout
            .entries
            .iter()
            .map(|e| (e.name.as_str(), e.shape.as_slice(), e.span.of(&self.data)))
    }
}
