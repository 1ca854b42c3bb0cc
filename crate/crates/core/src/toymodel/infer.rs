use super::ops::{dot, gelu, layer_norm, matvec, softmax};
use super::params::{LayerSpans, ModelWeights};
use super::{hook, ModelConfig, Perturbation, Site};
use crate::error::{Error, Result};

/// Per-layer keys and values of every position decoded so far, laid out as
/// `[positions, heads, head_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    hidden: usize,
    max_seq: usize,
    len: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        let cap = config.max_seq * config.hidden;
        Self {
            hidden: config.hidden,
            max_seq: config.max_seq,
            len: 0,
            keys: (0..config.layers).map(|_| Vec::with_capacity(cap)).collect(),
            values: (0..config.layers).map(|_| Vec::with_capacity(cap)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn max_seq(&self) -> usize {
        self.max_seq
    }

    pub fn layer_keys(&self, layer: usize) -> &[f32] {
        &self.keys[layer]
    }

    pub fn layer_values(&self, layer: usize) -> &[f32] {
        &self.values[layer]
    }

    pub fn clear(&mut self) {
        self.len = 0;
        self.keys.iter_mut().for_each(Vec::clear);
        self.values.iter_mut().for_each(Vec::clear);
    }
}

/// Causal attention of one query against the first `n` cached positions.
fn attend(q: &[f32], keys: &[f32], values: &[f32], n: usize, config: &ModelConfig, out: &mut [f32]) {
    let c = config.hidden;
    let d = config.head_dim();
    let scale = 1.0 / (d as f32).sqrt();
    let mut scores = vec![0.0f32; n];
    out.fill(0.0);
    for h in 0..config.heads {
        let qh = &q[h * d..(h + 1) * d];
        for (t, s) in scores.iter_mut().enumerate() {
            *s = dot(qh, &keys[t * c + h * d..t * c + (h + 1) * d]) * scale;
        }
        softmax(&mut scores);
        let oh = &mut out[h * d..(h + 1) * d];
        for (t, &p) in scores.iter().enumerate() {
            for (o, v) in oh.iter_mut().zip(&values[t * c + h * d..t * c + (h + 1) * d]) {
                *o += p * v;
            }
        }
    }
}

struct Scratch {
    h: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    att: Vec<f32>,
    o: Vec<f32>,
    u: Vec<f32>,
    m: Vec<f32>,
}

impl Scratch {
    fn new(c: usize) -> Self {
        Self {
            h: vec![0.0; c],
            q: vec![0.0; c],
            k: vec![0.0; c],
            v: vec![0.0; c],
            att: vec![0.0; c],
            o: vec![0.0; c],
            u: vec![0.0; 4 * c],
            m: vec![0.0; c],
        }
    }
}

fn check_token(config: &ModelConfig, token: u32) -> Result<()> {
    if (token as usize) < config.embedding_rows() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "token {token} outside embedding table of {} rows",
            config.embedding_rows()
        )))
    }
}

fn embed(w: &ModelWeights, token: u32, pos: usize) -> Vec<f32> {
    let c = w.config.hidden;
    let tok = &w.layout.tok_emb.of(&w.data)[token as usize * c..(token as usize + 1) * c];
    let p = &w.layout.pos_emb.of(&w.data)[pos * c..(pos + 1) * c];
    tok.iter().zip(p).map(|(a, b)| a + b).collect()
}

/// Query, key and value of one position (hooks applied).
fn project_qkv(w: &ModelWeights, l: usize, spans: &LayerSpans, x: &[f32], s: &mut Scratch, p: Option<&Perturbation>) {
    let d = &w.data;
    layer_norm(x, spans.ln1_g.of(d), spans.ln1_b.of(d), &mut s.h);
    matvec(&s.h, spans.wq.of(d), &mut s.q);
    hook(p, l, Site::Query, &mut s.q);
    matvec(&s.h, spans.wk.of(d), &mut s.k);
    hook(p, l, Site::Key, &mut s.k);
    matvec(&s.h, spans.wv.of(d), &mut s.v);
    hook(p, l, Site::Value, &mut s.v);
}

/// Output projection, residual add, MLP and its residual add, given `s.att`.
fn finish_block(w: &ModelWeights, l: usize, spans: &LayerSpans, x: &mut [f32], s: &mut Scratch, p: Option<&Perturbation>) {
    let d = &w.data;
    matvec(&s.att, spans.wo.of(d), &mut s.o);
    hook(p, l, Site::AttnOut, &mut s.o);
    for (xi, oi) in x.iter_mut().zip(&s.o) {
        *xi += oi;
    }
    layer_norm(x, spans.ln2_g.of(d), spans.ln2_b.of(d), &mut s.h);
    matvec(&s.h, spans.w1.of(d), &mut s.u);
    for (u, b) in s.u.iter_mut().zip(spans.b1.of(d)) {
        *u = gelu(*u + b);
    }
    matvec(&s.u, spans.w2.of(d), &mut s.m);
    for (m, b) in s.m.iter_mut().zip(spans.b2.of(d)) {
        *m += b;
    }
    hook(p, l, Site::MlpOut, &mut s.m);
    for (xi, mi) in x.iter_mut().zip(&s.m) {
        *xi += mi;
    }
    hook(p, l, Site::Residual, x);
}

fn head(w: &ModelWeights, x: &[f32]) -> Vec<f32> {
    let c = w.config.hidden;
    let d = &w.data;
    let mut hf = vec![0.0f32; c];
    layer_norm(x, w.layout.lnf_g.of(d), w.layout.lnf_b.of(d), &mut hf);
    w.layout
        .tok_emb
        .of(d)
        .chunks_exact(c)
        .take(w.config.vocab_size)
        .map(|row| dot(&hf, row))
        .collect()
}

/// Decodes one token, appending its keys and values to `cache`. Returns the
/// next-token logits over the image vocabulary.
pub fn forward_step(w: &ModelWeights, cache: &mut KvCache, token: u32, perturb: Option<&Perturbation>) -> Result<Vec<f32>> {
    step_impl(w, cache, token, perturb, None)
}

/// Like [`forward_step`], also returning the residual stream after every block.
pub fn forward_step_traced(
    w: &ModelWeights,
    cache: &mut KvCache,
    token: u32,
    perturb: Option<&Perturbation>,
) -> Result<(Vec<f32>, Vec<Vec<f32>>)> {
    let mut trace = Vec::with_capacity(w.config.layers);
    let logits = step_impl(w, cache, token, perturb, Some(&mut trace))?;
    Ok((logits, trace))
}

fn step_impl(
    w: &ModelWeights,
    cache: &mut KvCache,
    token: u32,
    perturb: Option<&Perturbation>,
    mut trace: Option<&mut Vec<Vec<f32>>>,
) -> Result<Vec<f32>> {
    let config = &w.config;
    if cache.hidden != config.hidden || cache.keys.len() != config.layers {
        return Err(Error::invalid("cache was built for a different model"));
    }
    if cache.len >= config.max_seq {
        return Err(Error::SequenceTooLong {
            position: cache.len,
            max_seq: config.max_seq,
        });
    }
    check_token(config, token)?;
    if let Some(p) = perturb {
        p.validate(config)?;
    }
    let pos = cache.len;
    let mut x = embed(w, token, pos);
    let mut s = Scratch::new(config.hidden);
    for (l, spans) in w.layout.layers.iter().enumerate() {
        project_qkv(w, l, spans, &x, &mut s, perturb);
        cache.keys[l].extend_from_slice(&s.k);
        cache.values[l].extend_from_slice(&s.v);
        attend(&s.q, &cache.keys[l], &cache.values[l], pos + 1, config, &mut s.att);
        finish_block(w, l, spans, &mut x, &mut s, perturb);
        if let Some(t) = trace.as_deref_mut() {
            t.push(x.clone());
        }
    }
    cache.len += 1;
    Ok(head(w, &x))
}

/// Logits at every position of `tokens`, recomputed layer by layer over the
/// whole sequence without a cache.
pub fn forward_recompute(w: &ModelWeights, tokens: &[u32], perturb: Option<&Perturbation>) -> Result<Vec<Vec<f32>>> {
    let config = &w.config;
    let c = config.hidden;
    let n = tokens.len();
    if n > config.max_seq {
        return Err(Error::SequenceTooLong {
            position: n - 1,
            max_seq: config.max_seq,
        });
    }
    for &t in tokens {
        check_token(config, t)?;
    }
    if let Some(p) = perturb {
        p.validate(config)?;
    }
    let mut xs: Vec<Vec<f32>> = tokens.iter().enumerate().map(|(pos, &t)| embed(w, t, pos)).collect();
    let mut s = Scratch::new(c);
    for (l, spans) in w.layout.layers.iter().enumerate() {
        let mut keys = Vec::with_capacity(n * c);
        let mut values = Vec::with_capacity(n * c);
        let mut queries = Vec::with_capacity(n);
        for x in &xs {
            project_qkv(w, l, spans, x, &mut s, perturb);
            keys.extend_from_slice(&s.k);
            values.extend_from_slice(&s.v);
            queries.push(s.q.clone());
        }
        for (pos, x) in xs.iter_mut().enumerate() {
            attend(&queries[pos], &keys, &values, pos + 1, config, &mut s.att);
            finish_block(w, l, spans, x, &mut s, perturb);
        }
    }
    Ok(xs.iter().map(|x| head(w, x)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use crate::spectral::{Renorm, SelectionMask, Weakener};
    use crate::toymodel::{HookSet, HookSite, Site, WeakOp};
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            hidden: 16,
            heads: 2,
            layers: 3,
            max_seq: 12,
            class_count: 3,
        }
    }

    fn model(seed: u64) -> ModelWeights {
        ModelWeights::init(small_config(), 0.3, &mut seed::rng(seed, "test", 0)).unwrap()
    }

    fn random_tokens(n: usize, seed: u64) -> Vec<u32> {
        let cfg = small_config();
        let mut rng = seed::rng(seed, "tokens", 0);
        (0..n).map(|_| rng.random_range(0..cfg.embedding_rows() as u32)).collect()
    }

    fn spectral(hooks: HookSet, lo: f64, hi: f64) -> Perturbation {
        let mask = SelectionMask::from_range(16, lo, hi, true).unwrap();
        Perturbation::spectral(hooks, Weakener::new(mask, Renorm::Spectral.into()).unwrap())
    }

    fn max_diff(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn cache_matches_recompute_with_and_without_hooks() {
        let w = model(1);
        let tokens = random_tokens(12, 2);
        let p = spectral(HookSet::parse("0.v,1.k,2.q,1.a,2.m,0.r", 3).unwrap(), 0.0, 0.25);
        for perturb in [None, Some(&p)] {
            let full = forward_recompute(&w, &tokens, perturb).unwrap();
            let mut cache = KvCache::new(w.config());
            for (t, &tok) in tokens.iter().enumerate() {
                let logits = forward_step(&w, &mut cache, tok, perturb).unwrap();
                assert!(max_diff(&logits, &full[t]) < 1e-5);
            }
        }
    }

    #[test]
    fn overflow_is_reported() {
        let w = model(3);
        let mut cache = KvCache::new(w.config());
        for &t in &random_tokens(12, 4) {
            forward_step(&w, &mut cache, t, None).unwrap();
        }
        let err = forward_step(&w, &mut cache, 0, None).unwrap_err();
        assert!(matches!(err, Error::SequenceTooLong { position: 12, max_seq: 12 }));
        assert_eq!(cache.len(), 12);
        assert!(forward_recompute(&w, &random_tokens(13, 4), None).is_err());
    }

    #[test]
    fn bad_tokens_and_hooks_are_rejected() {
        let w = model(3);
        let mut cache = KvCache::new(w.config());
        assert!(forward_step(&w, &mut cache, 999, None).is_err());
        let p = Perturbation::new(HookSet::from_iter([HookSite::new(7, Site::Value)]), WeakOp::Prune);
        assert!(forward_step(&w, &mut cache, 0, Some(&p)).is_err());
        assert!(cache.is_empty());
    }

    #[test]
    fn identity_mask_hooks_are_a_no_op() {
        let w = model(5);
        let tokens = random_tokens(10, 6);
        let base = forward_recompute(&w, &tokens, None).unwrap();
        for site in Site::ALL {
            let p = spectral(HookSet::all_layers(3, site), 0.0, 1.0);
            let hooked = forward_recompute(&w, &tokens, Some(&p)).unwrap();
            for (a, b) in base.iter().zip(&hooked) {
                assert!(max_diff(a, b) < 1e-4, "site {site:?}");
            }
        }
    }

    #[test]
    fn empty_hook_set_is_bitwise_base() {
        let w = model(7);
        let tokens = random_tokens(10, 8);
        let p = spectral(HookSet::new(), 0.0, 0.1);
        let mut a = KvCache::new(w.config());
        let mut b = KvCache::new(w.config());
        for &t in &tokens {
            let la = forward_step(&w, &mut a, t, None).unwrap();
            let lb = forward_step(&w, &mut b, t, Some(&p)).unwrap();
            assert!(la.iter().zip(&lb).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(a, b);
    }

    #[test]
    fn hooks_leave_earlier_layers_untouched() {
        let w = model(9);
        let tokens = random_tokens(8, 10);
        for layer in 0..3 {
            let p = spectral(HookSet::from_iter([HookSite::new(layer, Site::Value), HookSite::new(layer, Site::Residual)]), 0.0, 0.1);
            let mut base = KvCache::new(w.config());
            let mut hooked = KvCache::new(w.config());
            for &t in &tokens {
                let (_, tb) = forward_step_traced(&w, &mut base, t, None).unwrap();
                let (_, th) = forward_step_traced(&w, &mut hooked, t, Some(&p)).unwrap();
                for l in 0..layer {
                    assert!(tb[l].iter().zip(&th[l]).all(|(x, y)| x.to_bits() == y.to_bits()));
                }
                assert!(max_diff(&tb[layer], &th[layer]) > 0.0);
            }
        }
    }

    #[test]
    fn future_tokens_do_not_affect_past_logits() {
        let w = model(11);
        let a = random_tokens(10, 12);
        let mut b = a.clone();
        for t in b.iter_mut().skip(6) {
            *t = (*t + 5) % 16;
        }
        let la = forward_recompute(&w, &a, None).unwrap();
        let lb = forward_recompute(&w, &b, None).unwrap();
        for t in 0..6 {
            assert!(la[t].iter().zip(&lb[t]).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(max_diff(&la[7], &lb[7]) > 0.0);
    }

    #[test]
    fn equal_caches_give_identical_logits() {
        let w = model(13);
        let mut cache = KvCache::new(w.config());
        for &t in &random_tokens(5, 14) {
            forward_step(&w, &mut cache, t, None).unwrap();
        }
        let p = spectral(HookSet::all_layers(3, Site::Value), 0.0, 0.2);
        let mut c1 = cache.clone();
        let mut c2 = cache.clone();
        let l1 = forward_step(&w, &mut c1, 3, Some(&p)).unwrap();
        let l2 = forward_step(&w, &mut c2, 3, Some(&p)).unwrap();
        assert!(l1.iter().zip(&l2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
