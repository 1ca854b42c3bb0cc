//! Batched forward/backward pass and AdamW training loop.
//!
//! Training uses its own layout-major kernels built on `sgemm`; inference in
//! [`super::infer`] is a separate token-at-a-time path. The two agree to float
//! rounding, which the tests check.

use rand::Rng;

use super::ops::{gelu, gelu_grad, gemm, LN_EPS};
use super::params::{LayerSpans, ModelWeights, Span};
use super::{forward_recompute, ModelConfig};
use crate::config::KeyValues;
use crate::dataset::TokenGrid;
use crate::error::{Error, Result};
use crate::seed::{self, streams};

const DEFAULT_RECIPE: &str = include_str!("../../config/train.conf");

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f32,
    pub warmup_steps: usize,
    /// Floor of the cosine decay as a fraction of `learning_rate`.
    pub min_lr_ratio: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    /// Decoupled decay, applied to matrices and embeddings only.
    pub weight_decay: f32,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f32,
    /// Chance of replacing a sequence's class token by the null class.
    pub null_class_prob: f32,
    pub init_std: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let kv = KeyValues::parse(DEFAULT_RECIPE, "train.conf").expect("built-in recipe parses");
        let mut cfg = Self {
            batch_size: 0,
            learning_rate: 0.0,
            warmup_steps: 0,
            min_lr_ratio: 0.0,
            beta1: 0.0,
            beta2: 0.0,
            adam_eps: 0.0,
            weight_decay: 0.0,
            grad_clip: 0.0,
            null_class_prob: 0.0,
            init_std: 0.0,
        };
        cfg.apply(&kv).expect("built-in recipe is valid");
        kv.ensure_consumed().expect("built-in recipe has no stray keys");
        cfg
    }
}

impl TrainConfig {
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.read_into("batch_size", &mut self.batch_size)?;
        kv.read_into("learning_rate", &mut self.learning_rate)?;
        kv.read_into("warmup_steps", &mut self.warmup_steps)?;
        kv.read_into("min_lr_ratio", &mut self.min_lr_ratio)?;
        kv.read_into("beta1", &mut self.beta1)?;
        kv.read_into("beta2", &mut self.beta2)?;
        kv.read_into("adam_eps", &mut self.adam_eps)?;
        kv.read_into("weight_decay", &mut self.weight_decay)?;
        kv.read_into("grad_clip", &mut self.grad_clip)?;
        kv.read_into("null_class_prob", &mut self.null_class_prob)?;
        kv.read_into("init_std", &mut self.init_std)?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::invalid(format!("training config: {what}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad("min_lr_ratio must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("adam_eps must be positive; weight_decay and grad_clip non-negative");
        }
        if !(0.0..=1.0).contains(&self.null_class_prob) {
            return bad("null_class_prob must lie in [0, 1]");
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be positive");
        }
        Ok(())
    }

    /// Linear warmup, then cosine decay to `min_lr_ratio · learning_rate` at the last step.
    pub fn learning_rate_at(&self, step: usize, total: usize) -> f32 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f32 / self.warmup_steps as f32;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1) as f32;
        let t = ((step - self.warmup_steps) as f32 / span).min(1.0);
        let floor = self.learning_rate * self.min_lr_ratio;
        floor + 0.5 * (self.learning_rate - floor) * (1.0 + (std::f32::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    /// Mean per-token loss of each step's batch, measured before the update.
    pub losses: Vec<f32>,
}

impl TrainOutcome {
    /// Mean of the last `window` step losses.
    pub fn final_loss(&self, window: usize) -> Option<f32> {
        let n = window.min(self.losses.len());
        (n > 0).then(|| self.losses[self.losses.len() - n..].iter().sum::<f32>() / n as f32)
    }
}

/// Token sequences of a batch shifted into inputs and targets.
/// Targets are `-1` where no loss applies (the position predicting the class).
struct Batch {
    b: usize,
    s: usize,
    inputs: Vec<u32>,
    targets: Vec<i64>,
}

impl Batch {
    fn rows(&self) -> usize {
        self.b * self.s
    }

    fn new(config: &ModelConfig, sequences: &[Vec<u32>]) -> Self {
        let s = sequences[0].len() - 1;
        let mut inputs = Vec::with_capacity(sequences.len() * s);
        let mut targets = Vec::with_capacity(sequences.len() * s);
        for seq in sequences {
            inputs.extend_from_slice(&seq[..s]);
            targets.extend(seq[1..].iter().enumerate().map(|(i, &t)| {
                if i == 0 || t as usize >= config.vocab_size {
                    -1
                } else {
                    t as i64
                }
            }));
        }
        Self {
            b: sequences.len(),
            s,
            inputs,
            targets,
        }
    }
}

/// `[BOS, class, t0, ...]` for a grid under an explicit class token.
fn sequence(config: &ModelConfig, grid: &TokenGrid, class_token: u32) -> Vec<u32> {
    let mut seq = Vec::with_capacity(grid.tokens().len() + 2);
    seq.push(config.bos_token());
    seq.push(class_token);
    seq.extend_from_slice(grid.tokens());
    seq
}

fn check_corpus(config: &ModelConfig, corpus: &[TokenGrid]) -> Result<()> {
    let first = corpus.first().ok_or_else(|| Error::invalid("training corpus is empty"))?;
    let len = first.tokens().len();
    if len + 2 > config.max_seq {
        return Err(Error::invalid(format!(
            "grids of {len} tokens need max_seq >= {}, model has {}",
            len + 2,
            config.max_seq
        )));
    }
    for (i, g) in corpus.iter().enumerate() {
        if g.tokens().len() != len {
            return Err(Error::invalid(format!("grid {i} has {} tokens, expected {len}", g.tokens().len())));
        }
        if let Some(&t) = g.tokens().iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(Error::invalid(format!("grid {i} has token {t} outside the vocabulary")));
        }
        if let Some(c) = g.class_id() {
            if c >= config.class_count {
                return Err(Error::invalid(format!("grid {i} has class {c}, model knows {}", config.class_count)));
            }
        }
    }
    Ok(())
}

struct LayerTape {
    xhat1: Vec<f32>,
    rstd1: Vec<f32>,
    h1: Vec<f32>,
    // Head-split [b, head, s, d].
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    // Attention weights [b, head, s, s], zero above the diagonal.
    p: Vec<f32>,
    att: Vec<f32>,
    xhat2: Vec<f32>,
    rstd2: Vec<f32>,
    h2: Vec<f32>,
    u: Vec<f32>,
    g: Vec<f32>,
}

struct Tape {
    layers: Vec<LayerTape>,
    xhatf: Vec<f32>,
    rstdf: Vec<f32>,
    hf: Vec<f32>,
    /// Softmax over the image vocabulary, `[rows, vocab]`.
    probs: Vec<f32>,
}

fn ln_rows(x: &[f32], gain: &[f32], bias: &[f32], c: usize, out: &mut [f32], xhat: &mut [f32], rstd: &mut [f32]) {
    for (r, row) in x.chunks_exact(c).enumerate() {
        let mean = row.iter().sum::<f32>() / c as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for i in 0..c {
            let xh = (row[i] - mean) * rs;
            xhat[r * c + i] = xh;
            out[r * c + i] = xh * gain[i] + bias[i];
        }
    }
}

/// Accumulates gain/bias gradients and adds the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
fn ln_rows_backward(
    dy: &[f32],
    xhat: &[f32],
    rstd: &[f32],
    gain: &[f32],
    c: usize,
    dgain: &mut [f32],
    dbias: &mut [f32],
    dx: &mut [f32],
) {
    let mut dxh = vec![0.0f32; c];
    for r in 0..rstd.len() {
        let dyr = &dy[r * c..(r + 1) * c];
        let xr = &xhat[r * c..(r + 1) * c];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for i in 0..c {
            dgain[i] += dyr[i] * xr[i];
            dbias[i] += dyr[i];
            dxh[i] = dyr[i] * gain[i];
            m1 += dxh[i];
            m2 += dxh[i] * xr[i];
        }
        m1 /= c as f32;
        m2 /= c as f32;
        for i in 0..c {
            dx[r * c + i] += rstd[r] * (dxh[i] - m1 - xr[i] * m2);
        }
    }
}

/// `[rows, C]` with heads interleaved to `[b, head, s, d]`.
fn split_heads(x: &[f32], b: usize, s: usize, heads: usize, d: usize) -> Vec<f32> {
    let c = heads * d;
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for h in 0..heads {
            for t in 0..s {
                let src = (bi * s + t) * c + h * d;
                let dst = ((bi * heads + h) * s + t) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

fn merge_heads(x: &[f32], b: usize, s: usize, heads: usize, d: usize) -> Vec<f32> {
    let c = heads * d;
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for h in 0..heads {
            for t in 0..s {
                let dst = (bi * s + t) * c + h * d;
                let src = ((bi * heads + h) * s + t) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

fn add_col_sums(m: &[f32], cols: usize, out: &mut [f32]) {
    for row in m.chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

fn forward(w: &ModelWeights, batch: &Batch) -> (f64, Tape) {
    let cfg = &w.config;
    let d = &w.data;
    let (c, n, s, heads, hd, vocab) = (cfg.hidden, batch.rows(), batch.s, cfg.heads, cfg.head_dim(), cfg.vocab_size);
    let scale = 1.0 / (hd as f32).sqrt();
    let tok = w.layout.tok_emb.of(d);
    let pos = w.layout.pos_emb.of(d);

    let mut x = vec![0.0f32; n * c];
    for (r, &t) in batch.inputs.iter().enumerate() {
        let p = r % s;
        for i in 0..c {
            x[r * c + i] = tok[t as usize * c + i] + pos[p * c + i];
        }
    }

    let mut layers = Vec::with_capacity(cfg.layers);
    for spans in &w.layout.layers {
        let mut xhat1 = vec![0.0; n * c];
        let mut rstd1 = vec![0.0; n];
        let mut h1 = vec![0.0; n * c];
        ln_rows(&x, spans.ln1_g.of(d), spans.ln1_b.of(d), c, &mut h1, &mut xhat1, &mut rstd1);
        let project = |wspan: Span| {
            let mut out = vec![0.0; n * c];
            gemm(n, c, c, &h1, false, wspan.of(d), false, &mut out, 0.0);
            split_heads(&out, batch.b, s, heads, hd)
        };
        let q = project(spans.wq);
        let k = project(spans.wk);
        let v = project(spans.wv);

        let mut p = vec![0.0f32; batch.b * heads * s * s];
        let mut atth = vec![0.0f32; n * c];
        for bh in 0..batch.b * heads {
            let qh = &q[bh * s * hd..(bh + 1) * s * hd];
            let kh = &k[bh * s * hd..(bh + 1) * s * hd];
            let vh = &v[bh * s * hd..(bh + 1) * s * hd];
            let ph = &mut p[bh * s * s..(bh + 1) * s * s];
            gemm(s, hd, s, qh, false, kh, true, ph, 0.0);
            for (i, row) in ph.chunks_exact_mut(s).enumerate() {
                let live = &mut row[..=i];
                live.iter_mut().for_each(|v| *v *= scale);
                super::ops::softmax(live);
                row[i + 1..].fill(0.0);
            }
            gemm(s, s, hd, ph, false, vh, false, &mut atth[bh * s * hd..(bh + 1) * s * hd], 0.0);
        }
        let att = merge_heads(&atth, batch.b, s, heads, hd);
        gemm(n, c, c, &att, false, spans.wo.of(d), false, &mut x, 1.0);

        let mut xhat2 = vec![0.0; n * c];
        let mut rstd2 = vec![0.0; n];
        let mut h2 = vec![0.0; n * c];
        ln_rows(&x, spans.ln2_g.of(d), spans.ln2_b.of(d), c, &mut h2, &mut xhat2, &mut rstd2);
        let mut u = vec![0.0; n * 4 * c];
        gemm(n, c, 4 * c, &h2, false, spans.w1.of(d), false, &mut u, 0.0);
        let b1 = spans.b1.of(d);
        for row in u.chunks_exact_mut(4 * c) {
            row.iter_mut().zip(b1).for_each(|(v, b)| *v += b);
        }
        let g: Vec<f32> = u.iter().map(|&v| gelu(v)).collect();
        let mut m = vec![0.0; n * c];
        gemm(n, 4 * c, c, &g, false, spans.w2.of(d), false, &mut m, 0.0);
        let b2 = spans.b2.of(d);
        for (xr, mr) in x.chunks_exact_mut(c).zip(m.chunks_exact(c)) {
            for i in 0..c {
                xr[i] += mr[i] + b2[i];
            }
        }
        layers.push(LayerTape {
            xhat1,
            rstd1,
            h1,
            q,
            k,
            v,
            p,
            att,
            xhat2,
            rstd2,
            h2,
            u,
            g,
        });
    }

    let mut xhatf = vec![0.0; n * c];
    let mut rstdf = vec![0.0; n];
    let mut hf = vec![0.0; n * c];
    ln_rows(&x, w.layout.lnf_g.of(d), w.layout.lnf_b.of(d), c, &mut hf, &mut xhatf, &mut rstdf);
    let mut probs = vec![0.0f32; n * vocab];
    gemm(n, c, vocab, &hf, false, &tok[..vocab * c], true, &mut probs, 0.0);
    let mut loss = 0.0f64;
    let mut count = 0usize;
    for (row, &t) in probs.chunks_exact_mut(vocab).zip(&batch.targets) {
        super::ops::softmax(row);
        if t >= 0 {
            loss -= f64::from(row[t as usize].max(f32::MIN_POSITIVE)).ln();
            count += 1;
        }
    }
    let tape = Tape {
        layers,
        xhatf,
        rstdf,
        hf,
        probs,
    };
    (loss / count.max(1) as f64, tape)
}

fn backward(w: &ModelWeights, batch: &Batch, tape: Tape, grad: &mut [f32]) {
    let cfg = &w.config;
    let d = &w.data;
    let (c, n, s, heads, hd, vocab) = (cfg.hidden, batch.rows(), batch.s, cfg.heads, cfg.head_dim(), cfg.vocab_size);
    let scale = 1.0 / (hd as f32).sqrt();
    let count = batch.targets.iter().filter(|&&t| t >= 0).count().max(1) as f32;

    let mut dlogits = tape.probs;
    for (row, &t) in dlogits.chunks_exact_mut(vocab).zip(&batch.targets) {
        if t < 0 {
            row.fill(0.0);
        } else {
            row[t as usize] -= 1.0;
            row.iter_mut().for_each(|v| *v /= count);
        }
    }
    let tok_span = w.layout.tok_emb;
    gemm(vocab, n, c, &dlogits, true, &tape.hf, false, &mut tok_span.of_mut(grad)[..vocab * c], 1.0);
    let mut dhf = vec![0.0f32; n * c];
    gemm(n, vocab, c, &dlogits, false, &tok_span.of(d)[..vocab * c], false, &mut dhf, 0.0);
    drop(dlogits);

    let mut dx = vec![0.0f32; n * c];
    {
        let (mut dg, mut db) = (vec![0.0; c], vec![0.0; c]);
        ln_rows_backward(&dhf, &tape.xhatf, &tape.rstdf, w.layout.lnf_g.of(d), c, &mut dg, &mut db, &mut dx);
        add_into(w.layout.lnf_g.of_mut(grad), &dg);
        add_into(w.layout.lnf_b.of_mut(grad), &db);
    }

    for (spans, lt) in w.layout.layers.iter().zip(tape.layers).rev() {
        layer_backward(d, spans, lt, &mut dx, grad, (c, n, s, heads, hd, batch.b), scale);
    }

    let tok_grad = tok_span.of_mut(grad);
    for (r, &t) in batch.inputs.iter().enumerate() {
        add_into(&mut tok_grad[t as usize * c..(t as usize + 1) * c], &dx[r * c..(r + 1) * c]);
    }
    let pos_grad = w.layout.pos_emb.of_mut(grad);
    for r in 0..n {
        let p = r % s;
        add_into(&mut pos_grad[p * c..(p + 1) * c], &dx[r * c..(r + 1) * c]);
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn layer_backward(
    d: &[f32],
    spans: &LayerSpans,
    lt: LayerTape,
    dx: &mut [f32],
    grad: &mut [f32],
    dims: (usize, usize, usize, usize, usize, usize),
    scale: f32,
) {
    let (c, n, s, heads, hd, b) = dims;

    // MLP branch; `dx` is also the gradient of its output.
    add_col_sums(dx, c, spans.b2.of_mut(grad));
    gemm(4 * c, n, c, &lt.g, true, dx, false, spans.w2.of_mut(grad), 1.0);
    let mut du = vec![0.0f32; n * 4 * c];
    gemm(n, c, 4 * c, dx, false, spans.w2.of(d), true, &mut du, 0.0);
    du.iter_mut().zip(&lt.u).for_each(|(g, &u)| *g *= gelu_grad(u));
    drop(lt.g);
    add_col_sums(&du, 4 * c, spans.b1.of_mut(grad));
    gemm(c, n, 4 * c, &lt.h2, true, &du, false, spans.w1.of_mut(grad), 1.0);
    let mut dh2 = vec![0.0f32; n * c];
    gemm(n, 4 * c, c, &du, false, spans.w1.of(d), true, &mut dh2, 0.0);
    drop(du);
    {
        let (mut dg, mut db) = (vec![0.0; c], vec![0.0; c]);
        ln_rows_backward(&dh2, &lt.xhat2, &lt.rstd2, spans.ln2_g.of(d), c, &mut dg, &mut db, dx);
        add_into(spans.ln2_g.of_mut(grad), &dg);
        add_into(spans.ln2_b.of_mut(grad), &db);
    }

    // Attention branch.
    gemm(c, n, c, &lt.att, true, dx, false, spans.wo.of_mut(grad), 1.0);
    let mut datt = vec![0.0f32; n * c];
    gemm(n, c, c, dx, false, spans.wo.of(d), true, &mut datt, 0.0);
    let datth = split_heads(&datt, b, s, heads, hd);
    let mut dq = vec![0.0f32; n * c];
    let mut dk = vec![0.0f32; n * c];
    let mut dv = vec![0.0f32; n * c];
    let mut dp = vec![0.0f32; s * s];
    for bh in 0..b * heads {
        let blk = bh * s * hd..(bh + 1) * s * hd;
        let ph = &lt.p[bh * s * s..(bh + 1) * s * s];
        gemm(s, hd, s, &datth[blk.clone()], false, &lt.v[blk.clone()], true, &mut dp, 0.0);
        gemm(s, s, hd, ph, true, &datth[blk.clone()], false, &mut dv[blk.clone()], 0.0);
        for i in 0..s {
            let prow = &ph[i * s..(i + 1) * s];
            let drow = &mut dp[i * s..(i + 1) * s];
            let inner: f32 = prow[..=i].iter().zip(&drow[..=i]).map(|(p, g)| p * g).sum();
            for j in 0..=i {
                drow[j] = prow[j] * (drow[j] - inner) * scale;
            }
            drow[i + 1..].fill(0.0);
        }
        gemm(s, s, hd, &dp, false, &lt.k[blk.clone()], false, &mut dq[blk.clone()], 0.0);
        gemm(s, s, hd, &dp, true, &lt.q[blk.clone()], false, &mut dk[blk.clone()], 0.0);
    }
    let dq = merge_heads(&dq, b, s, heads, hd);
    let dk = merge_heads(&dk, b, s, heads, hd);
    let dv = merge_heads(&dv, b, s, heads, hd);
    let mut dh1 = vec![0.0f32; n * c];
    for (dproj, wspan) in [(&dq, spans.wq), (&dk, spans.wk), (&dv, spans.wv)] {
        gemm(c, n, c, &lt.h1, true, dproj, false, wspan.of_mut(grad), 1.0);
        gemm(n, c, c, dproj, false, wspan.of(d), true, &mut dh1, 1.0);
    }
    let (mut dg, mut db) = (vec![0.0; c], vec![0.0; c]);
    ln_rows_backward(&dh1, &lt.xhat1, &lt.rstd1, spans.ln1_g.of(d), c, &mut dg, &mut db, dx);
    add_into(spans.ln1_g.of_mut(grad), &dg);
    add_into(spans.ln1_b.of_mut(grad), &db);
}

/// Mean loss and gradient of one batch of full sequences.
fn loss_and_grad(w: &ModelWeights, sequences: &[Vec<u32>]) -> (f64, Vec<f32>) {
    let batch = Batch::new(&w.config, sequences);
    let (loss, tape) = forward(w, &batch);
    let mut grad = vec![0.0f32; w.data.len()];
    backward(w, &batch, tape, &mut grad);
    (loss, grad)
}

/// Trains a fresh model on `corpus` for `steps` AdamW updates.
///
/// Everything random (initial weights, batch draws, class dropout) comes from
/// streams derived from `seed`, so the same inputs give bitwise identical weights.
pub fn train(
    corpus: &[TokenGrid],
    model: ModelConfig,
    recipe: &TrainConfig,
    steps: usize,
    seed: u64,
) -> Result<TrainOutcome> {
    train_with_progress(corpus, model, recipe, steps, seed, |_, _| {})
}

/// [`train`] with a callback receiving `(step, loss)` after every update.
pub fn train_with_progress(
    corpus: &[TokenGrid],
    model: ModelConfig,
    recipe: &TrainConfig,
    steps: usize,
    seed: u64,
    mut progress: impl FnMut(usize, f32),
) -> Result<TrainOutcome> {
    model.validate()?;
    recipe.validate()?;
    check_corpus(&model, corpus)?;
    let mut weights = ModelWeights::init(model, recipe.init_std, &mut seed::rng(seed, streams::INIT, 0))?;
    let mut batch_rng = seed::rng(seed, streams::BATCH, 0);

    let decay_mask: Vec<bool> = {
        let mut mask = vec![false; weights.data.len()];
        for e in &weights.layout.entries {
            if e.shape.len() >= 2 {
                mask[e.span.offset..e.span.offset + e.span.len].fill(true);
            }
        }
        mask
    };
    let mut m1 = vec![0.0f32; weights.data.len()];
    let mut m2 = vec![0.0f32; weights.data.len()];
    let mut losses = Vec::with_capacity(steps);

    for step in 0..steps {
        let sequences: Vec<Vec<u32>> = (0..recipe.batch_size)
            .map(|_| {
                let grid = &corpus[batch_rng.random_range(0..corpus.len())];
                let drop = batch_rng.random::<f32>() < recipe.null_class_prob;
                let class = if drop { None } else { grid.class_id() };
                sequence(&model, grid, model.class_token(class))
            })
            .collect();
        let (loss, mut grad) = loss_and_grad(&weights, &sequences);
        if !loss.is_finite() {
            return Err(Error::DegenerateInput(format!("training diverged at step {step}")));
        }

        if recipe.grad_clip > 0.0 {
            let norm = grad.iter().map(|g| f64::from(*g) * f64::from(*g)).sum::<f64>().sqrt() as f32;
            if norm > recipe.grad_clip {
                let k = recipe.grad_clip / norm;
                grad.iter_mut().for_each(|g| *g *= k);
            }
        }

        let lr = recipe.learning_rate_at(step, steps);
        let t = (step + 1) as i32;
        let bc1 = 1.0 - recipe.beta1.powi(t);
        let bc2 = 1.0 - recipe.beta2.powi(t);
        for i in 0..weights.data.len() {
            let g = grad[i];
            m1[i] = recipe.beta1 * m1[i] + (1.0 - recipe.beta1) * g;
            m2[i] = recipe.beta2 * m2[i] + (1.0 - recipe.beta2) * g * g;
            let update = (m1[i] / bc1) / ((m2[i] / bc2).sqrt() + recipe.adam_eps);
            let p = &mut weights.data[i];
            if decay_mask[i] {
                *p -= lr * recipe.weight_decay * *p;
            }
            *p -= lr * update;
        }
        losses.push(loss as f32);
        progress(step, loss as f32);
    }
    Ok(TrainOutcome { weights, losses })
}

/// Mean per-token loss over `grids` under their own class labels, computed
/// with the batched training forward pass.
pub fn corpus_loss(weights: &ModelWeights, grids: &[TokenGrid], chunk: usize) -> Result<f64> {
    check_corpus(&weights.config, grids)?;
    let mut total = 0.0;
    for part in grids.chunks(chunk.max(1)) {
        let seqs: Vec<Vec<u32>> = part
            .iter()
            .map(|g| sequence(&weights.config, g, weights.config.class_token(g.class_id())))
            .collect();
        let (loss, _) = forward(weights, &Batch::new(&weights.config, &seqs));
        total += loss * part.len() as f64;
    }
    Ok(total / grids.len() as f64)
}

/// Log-likelihood (nats) of a grid's tokens given its class, via the
/// inference path.
pub fn sequence_log_likelihood(weights: &ModelWeights, grid: &TokenGrid) -> Result<f64> {
    let cfg = &weights.config;
    check_corpus(cfg, std::slice::from_ref(grid))?;
    let seq = sequence(cfg, grid, cfg.class_token(grid.class_id()));
    let logits = forward_recompute(weights, &seq[..seq.len() - 1], None)?;
    let mut ll = 0.0f64;
    for (row, &target) in logits.iter().skip(1).zip(&seq[2..]) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = f64::from(max) + row.iter().map(|&v| f64::from(v - max).exp()).sum::<f64>().ln();
        ll += f64::from(row[target as usize]) - lse;
    }
    Ok(ll)
}
