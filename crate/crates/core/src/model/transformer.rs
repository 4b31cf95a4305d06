//! Pre-norm transformer encoder–decoder with explicit backward passes.
//!
//! A batch is processed as one flat matrix of tokens (no padding); attention
//! runs per sentence over its own row range. Every sublayer's forward pass
//! returns a cache that its backward pass consumes in reverse order.

use std::sync::Arc;

use crate::numerics::ops::{self, LayerNormCache};
use crate::numerics::rng::Rng;
use crate::numerics::{Parameters, Tensor};
use crate::tokenizer::{TokenId, Vocabulary, BOS, EOS, PAD};

use super::config::{Direction, ModelConfig};
use super::{ModelError, Result};

const MASKED: f64 = -1e9;

/// One training pair as token ids, without BOS/EOS.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl Example {
    pub fn new(source: Vec<TokenId>, target: Vec<TokenId>) -> Self {
        Example { source, target }
    }
}

#[derive(Clone, Debug)]
pub struct TranslationModel {
    pub config: ModelConfig,
    pub params: Parameters,
    pub direction: Direction,
    pub seed: u64,
    pub vocab: Arc<Vocabulary>,
}

pub(crate) fn param<'a>(p: &'a Parameters, name: &str) -> Result<&'a Tensor> {
    p.get(name).ok_or_else(|| ModelError::MissingParameter(name.to_owned()))
}

/// `(name, shape)` of every parameter, in no particular order.
pub fn parameter_layout(config: &ModelConfig, vocab_size: usize) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (config.d_model, config.d_ffn);
    let mut out = vec![("embed".to_owned(), vec![vocab_size, d]), ("out.b".to_owned(), vec![vocab_size])];
    if !config.tied_embeddings {
        out.push(("out.w".into(), vec![d, vocab_size]));
    }
    let ln = |out: &mut Vec<(String, Vec<usize>)>, p: String| {
        out.push((format!("{p}.g"), vec![d]));
        out.push((format!("{p}.b"), vec![d]));
    };
    let attn = |out: &mut Vec<(String, Vec<usize>)>, p: String| {
        for m in ["q", "k", "v", "o"] {
            out.push((format!("{p}.{m}.w"), vec![d, d]));
            if m != "k" {
                out.push((format!("{p}.{m}.b"), vec![d]));
            }
        }
    };
    let ffn = |out: &mut Vec<(String, Vec<usize>)>, p: String| {
        out.push((format!("{p}.w1"), vec![d, f]));
        out.push((format!("{p}.b1"), vec![f]));
        out.push((format!("{p}.w2"), vec![f, d]));
        out.push((format!("{p}.b2"), vec![d]));
    };
    for l in 0..config.n_layers {
        ln(&mut out, format!("enc.{l}.ln1"));
        attn(&mut out, format!("enc.{l}.self"));
        ln(&mut out, format!("enc.{l}.ln2"));
        ffn(&mut out, format!("enc.{l}.ffn"));
        ln(&mut out, format!("dec.{l}.ln1"));
        attn(&mut out, format!("dec.{l}.self"));
        ln(&mut out, format!("dec.{l}.ln2"));
        attn(&mut out, format!("dec.{l}.cross"));
        ln(&mut out, format!("dec.{l}.ln3"));
        ffn(&mut out, format!("dec.{l}.ffn"));
    }
    ln(&mut out, "enc.ln".into());
    ln(&mut out, "dec.ln".into());
    out
}

/// Sinusoidal position table `[max_positions, d_model]`.
pub fn positional_table(max_positions: usize, d_model: usize) -> Tensor {
    Tensor::from_fn(&[max_positions, d_model], |idx| {
        let (pos, j) = (idx / d_model, idx % d_model);
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d_model as f64);
        let angle = pos as f64 * freq;
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl TranslationModel {
    /// Scaled-gaussian weights (std `1/sqrt(d_model)`), zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, vocab: Arc<Vocabulary>, seed: u64, direction: Direction) -> Result<Self> {
        config.validate()?;
        let mut layout = parameter_layout(&config, vocab.len());
        layout.sort();
        let std = 1.0 / (config.d_model as f64).sqrt();
        let mut rng = Rng::new(seed);
        let mut params = Parameters::new();
        for (name, shape) in layout {
            let t = if name.ends_with(".g") {
                Tensor::filled(&shape, 1.0)
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                Tensor::from_fn(&shape, |_| std * rng.gaussian())
            };
            params.insert(name, t);
        }
        Ok(TranslationModel {
            config,
            params,
            direction,
            seed,
            vocab,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub(crate) fn check_ids(&self, ids: &[TokenId], extra: usize) -> Result<()> {
        if ids.len() + extra > self.config.max_positions {
            return Err(ModelError::LengthOverflow {
                len: ids.len() + extra,
                max: self.config.max_positions,
            });
        }
        let v = self.vocab_size();
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(ModelError::OutOfVocab { id: bad, size: v });
        }
        Ok(())
    }

    /// Logits `[target_ids.len(), vocab]`; row `j` scores `target_ids[j]`
    /// given `source_ids` and `target_ids[..j]`.
    pub fn forward_logits(&self, source_ids: &[TokenId], target_ids: &[TokenId]) -> Result<Tensor> {
        if target_ids.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let ex = Example::new(source_ids.to_vec(), target_ids[..target_ids.len() - 1].to_vec());
        let (logits, _) = self.forward(&[ex], None)?;
        Ok(logits)
    }

    /// Final encoder states `[source_len + 1, d_model]` for one sentence.
    pub(crate) fn encode_only(&self, source_ids: &[TokenId]) -> Result<Tensor> {
        self.check_ids(source_ids, 1)?;
        let cfg = &self.config;
        let p = &self.params;
        let ids: Vec<TokenId> = source_ids.iter().copied().chain([EOS]).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let segs = [Segment::square(0, ids.len())];
        let mut drop = Dropout::new(0.0, None);
        let pe = positional_table(cfg.max_positions, cfg.d_model);
        let (mut x, _) = embed_fwd(p, &pe, &ids, &positions, cfg.d_model, &mut drop)?;
        for l in 0..cfg.n_layers {
            x = enc_layer_fwd(p, l, cfg, &x, &segs, &mut drop)?.0;
        }
        Ok(ops::layer_norm(&x, param(p, "enc.ln.g")?, param(p, "enc.ln.b")?)?.0)
    }

    pub(crate) fn forward(&self, batch: &[Example], rng: Option<&mut Rng>) -> Result<(Tensor, ForwardCache)> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        for ex in batch {
            self.check_ids(&ex.source, 1)?;
            self.check_ids(&ex.target, 1)?;
        }
        let mut drop = Dropout::new(self.config.dropout, rng);
        let p = &self.params;
        let cfg = &self.config;

        let mut enc_ids = Vec::new();
        let mut enc_pos = Vec::new();
        let mut dec_ids = Vec::new();
        let mut dec_pos = Vec::new();
        let mut labels = Vec::new();
        let mut enc_segs = Vec::with_capacity(batch.len());
        let mut dec_segs = Vec::with_capacity(batch.len());
        for ex in batch {
            let (e0, d0) = (enc_ids.len(), dec_ids.len());
            enc_ids.extend(ex.source.iter().copied().chain([EOS]));
            enc_pos.extend(0..ex.source.len() + 1);
            dec_ids.extend([BOS].into_iter().chain(ex.target.iter().copied()));
            dec_pos.extend(0..ex.target.len() + 1);
            labels.extend(ex.target.iter().copied().chain([EOS]));
            enc_segs.push((e0, ex.source.len() + 1));
            dec_segs.push((d0, ex.target.len() + 1));
        }
        let self_enc: Vec<Segment> = enc_segs.iter().map(|&(s, n)| Segment::square(s, n)).collect();
        let self_dec: Vec<Segment> = dec_segs.iter().map(|&(s, n)| Segment::square(s, n)).collect();
        let cross: Vec<Segment> = dec_segs
            .iter()
            .zip(&enc_segs)
            .map(|(&(q0, qn), &(k0, kn))| Segment { q0, qn, k0, kn })
            .collect();

        let pe = positional_table(cfg.max_positions, cfg.d_model);
        let (mut x, enc_embed) = embed_fwd(p, &pe, &enc_ids, &enc_pos, cfg.d_model, &mut drop)?;
        let mut enc_layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let (y, c) = enc_layer_fwd(p, l, cfg, &x, &self_enc, &mut drop)?;
            enc_layers.push(c);
            x = y;
        }
        let (enc_out, enc_ln) = ops::layer_norm(&x, param(p, "enc.ln.g")?, param(p, "enc.ln.b")?)?;

        let (mut y, dec_embed) = embed_fwd(p, &pe, &dec_ids, &dec_pos, cfg.d_model, &mut drop)?;
        let mut dec_layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let (z, c) = dec_layer_fwd(p, l, cfg, &y, &enc_out, &self_dec, &cross, &mut drop)?;
            dec_layers.push(c);
            y = z;
        }
        let (dec_out, dec_ln) = ops::layer_norm(&y, param(p, "dec.ln.g")?, param(p, "dec.ln.b")?)?;
        let logits = output_fwd(p, cfg, &dec_out)?;

        Ok((
            logits,
            ForwardCache {
                enc_ids,
                dec_ids,
                labels,
                self_enc,
                self_dec,
                cross,
                enc_embed,
                enc_layers,
                enc_ln,
                enc_out,
                dec_embed,
                dec_layers,
                dec_ln,
                dec_out,
            },
        ))
    }

    /// Label-smoothed token-mean loss and parameter gradients.
    ///
    /// Per non-PAD target token: `(1-ε)·NLL(gold) + ε·mean_v NLL(v)`.
    pub fn loss_and_grads(&self, batch: &[Example], label_smoothing: f64, rng: Option<&mut Rng>) -> Result<(f64, Parameters)> {
        let (logits, cache) = self.forward(batch, rng)?;
        let logp = ops::log_softmax(&logits);
        let (loss, count) = smoothed_loss(&logp, &cache.labels, label_smoothing);
        if !loss.is_finite() {
            return Err(ModelError::NonFinite { what: "loss".into() });
        }
        let v = logp.last_dim();
        let mut dlogp = Tensor::zeros(logp.shape());
        if count > 0 {
            let inv = 1.0 / count as f64;
            for (r, &label) in cache.labels.iter().enumerate() {
                if label == PAD {
                    continue;
                }
                let row = dlogp.row_mut(r);
                let uniform = -label_smoothing * inv / v as f64;
                for g in row.iter_mut() {
                    *g = uniform;
                }
                row[label] -= (1.0 - label_smoothing) * inv;
            }
        }
        let dlogits = ops::log_softmax_backward(&logp, &dlogp)?;
        let grads = self.backward(&cache, &dlogits)?;
        Ok((loss, grads))
    }

    /// Sum of gold-token NLL (ε = 0) and number of scored tokens.
    pub fn nll_sum(&self, batch: &[Example]) -> Result<(f64, usize)> {
        let (logits, cache) = self.forward(batch, None)?;
        let logp = ops::log_softmax(&logits);
        let mut total = 0.0;
        let mut count = 0;
        for (r, &label) in cache.labels.iter().enumerate() {
            if label != PAD {
                total -= logp.row(r)[label];
                count += 1;
            }
        }
        Ok((total, count))
    }

    fn backward(&self, cache: &ForwardCache, dlogits: &Tensor) -> Result<Parameters> {
        let p = &self.params;
        let cfg = &self.config;
        let mut g = Parameters::new();

        let d_dec_out = output_bwd(p, cfg, &mut g, &cache.dec_out, dlogits)?;
        let mut dy = ln_bwd(p, &mut g, "dec.ln", &cache.dec_ln, &d_dec_out)?;
        let mut d_enc_out = Tensor::zeros(cache.enc_out.shape());
        for l in (0..cfg.n_layers).rev() {
            dy = dec_layer_bwd(p, l, cfg, &mut g, &cache.dec_layers[l], &cache.enc_out, &cache.self_dec, &cache.cross, &dy, &mut d_enc_out)?;
        }
        embed_bwd(&mut g, p, &cache.dec_ids, &cache.dec_embed, cfg.d_model, &dy)?;

        let mut dx = ln_bwd(p, &mut g, "enc.ln", &cache.enc_ln, &d_enc_out)?;
        for l in (0..cfg.n_layers).rev() {
            dx = enc_layer_bwd(p, l, cfg, &mut g, &cache.enc_layers[l], &cache.self_enc, &dx)?;
        }
        embed_bwd(&mut g, p, &cache.enc_ids, &cache.enc_embed, cfg.d_model, &dx)?;

        // Parameters untouched by this batch still get an explicit zero gradient.
        for (name, t) in p.iter() {
            g.accum(name, t.shape());
        }
        Ok(g)
    }
}

/// Returns `(loss, scored_token_count)`.
pub(crate) fn smoothed_loss(logp: &Tensor, labels: &[TokenId], eps: f64) -> (f64, usize) {
    let v = logp.last_dim() as f64;
    let mut total = 0.0;
    let mut count = 0;
    for (r, &label) in labels.iter().enumerate() {
        if label == PAD {
            continue;
        }
        let row = logp.row(r);
        let nll = -row[label];
        let smooth = -row.iter().sum::<f64>() / v;
        total += (1.0 - eps) * nll + eps * smooth;
        count += 1;
    }
    if count == 0 {
        (0.0, 0)
    } else {
        (total / count as f64, count)
    }
}

pub(crate) struct ForwardCache {
    enc_ids: Vec<TokenId>,
    dec_ids: Vec<TokenId>,
    pub(crate) labels: Vec<TokenId>,
    self_enc: Vec<Segment>,
    self_dec: Vec<Segment>,
    cross: Vec<Segment>,
    enc_embed: Option<Tensor>,
    enc_layers: Vec<EncLayerCache>,
    enc_ln: LayerNormCache,
    pub(crate) enc_out: Tensor,
    dec_embed: Option<Tensor>,
    dec_layers: Vec<DecLayerCache>,
    dec_ln: LayerNormCache,
    dec_out: Tensor,
}

/// Query rows `[q0, q0+qn)` attend to key rows `[k0, k0+kn)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Segment {
    q0: usize,
    qn: usize,
    k0: usize,
    kn: usize,
}

impl Segment {
    fn square(start: usize, n: usize) -> Self {
        Segment {
            q0: start,
            qn: n,
            k0: start,
            kn: n,
        }
    }
}

/// Inverted dropout; inactive when the rate is zero or no RNG is supplied.
struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut Rng>,
}

impl<'a> Dropout<'a> {
    fn new(rate: f64, rng: Option<&'a mut Rng>) -> Self {
        Dropout { rate, rng }
    }

    /// Returns the dropped tensor and the scaled keep-mask, if any was applied.
    fn apply(&mut self, x: Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let rate = self.rate;
        match self.rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                let mask = Tensor::from_fn(x.shape(), |_| if rng.uniform() < rate { 0.0 } else { keep });
                Ok((ops::mul(&x, &mask)?, Some(mask)))
            }
            _ => Ok((x, None)),
        }
    }
}

fn apply_mask(dy: &Tensor, mask: &Option<Tensor>) -> Result<Tensor> {
    match mask {
        Some(m) => Ok(ops::mul(dy, m)?),
        None => Ok(dy.clone()),
    }
}

fn embed_fwd(
    p: &Parameters,
    pe: &Tensor,
    ids: &[TokenId],
    positions: &[usize],
    d_model: usize,
    drop: &mut Dropout,
) -> Result<(Tensor, Option<Tensor>)> {
    let emb = ops::embedding_lookup(param(p, "embed")?, ids)?;
    let emb = ops::scale(&emb, (d_model as f64).sqrt());
    let pos = ops::embedding_lookup(pe, positions)?;
    let x = ops::add(&emb, &pos)?;
    drop.apply(x)
}

fn embed_bwd(g: &mut Parameters, p: &Parameters, ids: &[TokenId], mask: &Option<Tensor>, d_model: usize, dx: &Tensor) -> Result<()> {
    let dx = apply_mask(dx, mask)?;
    let demb = ops::scale_backward(&dx, (d_model as f64).sqrt());
    let table = param(p, "embed")?;
    ops::embedding_accumulate(g.accum("embed", table.shape()), ids, &demb)?;
    Ok(())
}

fn output_fwd(p: &Parameters, cfg: &ModelConfig, h: &Tensor) -> Result<Tensor> {
    let raw = if cfg.tied_embeddings {
        ops::matmul_nt(h, param(p, "embed")?)?
    } else {
        ops::matmul(h, param(p, "out.w")?)?
    };
    Ok(ops::add(&raw, param(p, "out.b")?)?)
}

fn output_bwd(p: &Parameters, cfg: &ModelConfig, g: &mut Parameters, h: &Tensor, dlogits: &Tensor) -> Result<Tensor> {
    let b = param(p, "out.b")?;
    let (_, db) = ops::add_backward(b.shape(), dlogits)?;
    g.accum("out.b", b.shape()).add_assign(&db)?;
    if cfg.tied_embeddings {
        let e = param(p, "embed")?;
        // logits = h · Eᵀ
        let dh = ops::matmul(dlogits, e)?;
        let de = ops::matmul_tn(dlogits, h)?;
        g.accum("embed", e.shape()).add_assign(&de)?;
        Ok(dh)
    } else {
        let w = param(p, "out.w")?;
        let (dh, dw) = ops::matmul_backward(h, w, dlogits)?;
        g.accum("out.w", w.shape()).add_assign(&dw)?;
        Ok(dh)
    }
}

/// `x·W + b`, or `x·W` when the layer has no bias parameter.
fn linear_fwd(p: &Parameters, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let y = ops::matmul(x, param(p, &format!("{prefix}.w"))?)?;
    match p.get(&format!("{prefix}.b")) {
        Some(b) => Ok(ops::add(&y, b)?),
        None => Ok(y),
    }
}

fn linear_bwd(p: &Parameters, g: &mut Parameters, prefix: &str, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    let (wn, bn) = (format!("{prefix}.w"), format!("{prefix}.b"));
    let w = param(p, &wn)?;
    let (dx, dw) = ops::matmul_backward(x, w, dy)?;
    g.accum(&wn, w.shape()).add_assign(&dw)?;
    if let Some(b) = p.get(&bn) {
        let (_, db) = ops::add_backward(b.shape(), dy)?;
        g.accum(&bn, b.shape()).add_assign(&db)?;
    }
    Ok(dx)
}

fn ln_fwd(p: &Parameters, prefix: &str, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
    Ok(ops::layer_norm(x, param(p, &format!("{prefix}.g"))?, param(p, &format!("{prefix}.b"))?)?)
}

fn ln_bwd(p: &Parameters, g: &mut Parameters, prefix: &str, cache: &LayerNormCache, dy: &Tensor) -> Result<Tensor> {
    let (gn, bn) = (format!("{prefix}.g"), format!("{prefix}.b"));
    let gain = param(p, &gn)?;
    let (dx, dg, db) = ops::layer_norm_backward(cache, gain, dy)?;
    g.accum(&gn, gain.shape()).add_assign(&dg)?;
    g.accum(&bn, gain.shape()).add_assign(&db)?;
    Ok(dx)
}

fn block(t: &Tensor, r0: usize, nr: usize, c0: usize, nc: usize) -> Result<Tensor> {
    let rows = ops::slice(t, 0, r0, nr)?;
    Ok(ops::slice(&rows, 1, c0, nc)?)
}

fn add_block(t: &mut Tensor, r0: usize, c0: usize, src: &Tensor) {
    let nc = src.last_dim();
    for r in 0..src.rows() {
        let dst = &mut t.row_mut(r0 + r)[c0..c0 + nc];
        for (d, s) in dst.iter_mut().zip(src.row(r)) {
            *d += s;
        }
    }
}

fn causal_mask(n: usize) -> Tensor {
    Tensor::from_fn(&[n, n], |i| if i % n > i / n { MASKED } else { 0.0 })
}

struct AttnCache {
    xq: Tensor,
    xkv: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Attention probabilities per (segment, head), before dropout.
    probs: Vec<Tensor>,
    masks: Vec<Option<Tensor>>,
    heads: Tensor,
}

#[allow(clippy::too_many_arguments)]
fn attention_fwd(
    p: &Parameters,
    prefix: &str,
    cfg: &ModelConfig,
    xq: &Tensor,
    xkv: &Tensor,
    segs: &[Segment],
    causal: bool,
    drop: &mut Dropout,
) -> Result<(Tensor, AttnCache)> {
    let q = linear_fwd(p, &format!("{prefix}.q"), xq)?;
    let k = linear_fwd(p, &format!("{prefix}.k"), xkv)?;
    let v = linear_fwd(p, &format!("{prefix}.v"), xkv)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Tensor::zeros(&[xq.rows(), cfg.d_model]);
    let mut probs = Vec::with_capacity(segs.len() * cfg.n_heads);
    let mut masks = Vec::with_capacity(segs.len() * cfg.n_heads);
    for seg in segs {
        let mask = causal.then(|| causal_mask(seg.qn));
        for h in 0..cfg.n_heads {
            let qs = block(&q, seg.q0, seg.qn, h * dh, dh)?;
            let ks = block(&k, seg.k0, seg.kn, h * dh, dh)?;
            let vs = block(&v, seg.k0, seg.kn, h * dh, dh)?;
            let mut scores = ops::scale(&ops::matmul_nt(&qs, &ks)?, scale);
            if let Some(m) = &mask {
                scores = ops::add(&scores, m)?;
            }
            let pr = ops::softmax(&scores);
            let (pd, dm) = drop.apply(pr.clone())?;
            let out = ops::matmul(&pd, &vs)?;
            add_block(&mut heads, seg.q0, h * dh, &out);
            probs.push(pr);
            masks.push(dm);
        }
    }
    let out = linear_fwd(p, &format!("{prefix}.o"), &heads)?;
    Ok((
        out,
        AttnCache {
            xq: xq.clone(),
            xkv: xkv.clone(),
            q,
            k,
            v,
            probs,
            masks,
            heads,
        },
    ))
}

/// Returns `(d_xq, d_xkv)`.
fn attention_bwd(
    p: &Parameters,
    g: &mut Parameters,
    prefix: &str,
    cfg: &ModelConfig,
    c: &AttnCache,
    segs: &[Segment],
    dout: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let dheads = linear_bwd(p, g, &format!("{prefix}.o"), &c.heads, dout)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Tensor::zeros(c.q.shape());
    let mut dk = Tensor::zeros(c.k.shape());
    let mut dv = Tensor::zeros(c.v.shape());
    let mut idx = 0;
    for seg in segs {
        for h in 0..cfg.n_heads {
            let qs = block(&c.q, seg.q0, seg.qn, h * dh, dh)?;
            let ks = block(&c.k, seg.k0, seg.kn, h * dh, dh)?;
            let vs = block(&c.v, seg.k0, seg.kn, h * dh, dh)?;
            let dout_s = block(&dheads, seg.q0, seg.qn, h * dh, dh)?;
            let pr = &c.probs[idx];
            let pd = match &c.masks[idx] {
                Some(m) => ops::mul(pr, m)?,
                None => pr.clone(),
            };
            let (dpd, dvs) = ops::matmul_backward(&pd, &vs, &dout_s)?;
            let dpr = apply_mask(&dpd, &c.masks[idx])?;
            let dscores = ops::scale_backward(&ops::softmax_backward(pr, &dpr)?, scale);
            let dqs = ops::matmul(&dscores, &ks)?;
            let dks = ops::matmul_tn(&dscores, &qs)?;
            add_block(&mut dq, seg.q0, h * dh, &dqs);
            add_block(&mut dk, seg.k0, h * dh, &dks);
            add_block(&mut dv, seg.k0, h * dh, &dvs);
            idx += 1;
        }
    }
    let dxq = linear_bwd(p, g, &format!("{prefix}.q"), &c.xq, &dq)?;
    let mut dxkv = linear_bwd(p, g, &format!("{prefix}.k"), &c.xkv, &dk)?;
    dxkv.add_assign(&linear_bwd(p, g, &format!("{prefix}.v"), &c.xkv, &dv)?)?;
    Ok((dxq, dxkv))
}

struct FfnCache {
    x: Tensor,
    pre: Tensor,
    hidden: Tensor,
    mask: Option<Tensor>,
}

fn ffn_fwd(p: &Parameters, prefix: &str, x: &Tensor, drop: &mut Dropout) -> Result<(Tensor, FfnCache)> {
    let pre = ops::add(&ops::matmul(x, param(p, &format!("{prefix}.w1"))?)?, param(p, &format!("{prefix}.b1"))?)?;
    let (hidden, mask) = drop.apply(ops::relu(&pre))?;
    let y = ops::add(&ops::matmul(&hidden, param(p, &format!("{prefix}.w2"))?)?, param(p, &format!("{prefix}.b2"))?)?;
    Ok((
        y,
        FfnCache {
            x: x.clone(),
            pre,
            hidden,
            mask,
        },
    ))
}

fn ffn_bwd(p: &Parameters, g: &mut Parameters, prefix: &str, c: &FfnCache, dy: &Tensor) -> Result<Tensor> {
    let (w1n, b1n, w2n, b2n) = (
        format!("{prefix}.w1"),
        format!("{prefix}.b1"),
        format!("{prefix}.w2"),
        format!("{prefix}.b2"),
    );
    let w2 = param(p, &w2n)?;
    let (dhidden, dw2) = ops::matmul_backward(&c.hidden, w2, dy)?;
    let (_, db2) = ops::add_backward(&[w2.shape()[1]], dy)?;
    g.accum(&w2n, w2.shape()).add_assign(&dw2)?;
    g.accum(&b2n, db2.shape()).add_assign(&db2)?;
    let dact = apply_mask(&dhidden, &c.mask)?;
    let dpre = ops::relu_backward(&c.pre, &dact)?;
    let w1 = param(p, &w1n)?;
    let (dx, dw1) = ops::matmul_backward(&c.x, w1, &dpre)?;
    let (_, db1) = ops::add_backward(&[w1.shape()[1]], &dpre)?;
    g.accum(&w1n, w1.shape()).add_assign(&dw1)?;
    g.accum(&b1n, db1.shape()).add_assign(&db1)?;
    Ok(dx)
}

struct EncLayerCache {
    ln1: LayerNormCache,
    attn: AttnCache,
    ln2: LayerNormCache,
    ffn: FfnCache,
}

fn enc_layer_fwd(p: &Parameters, l: usize, cfg: &ModelConfig, x: &Tensor, segs: &[Segment], drop: &mut Dropout) -> Result<(Tensor, EncLayerCache)> {
    let (a, ln1) = ln_fwd(p, &format!("enc.{l}.ln1"), x)?;
    let (att, attn) = attention_fwd(p, &format!("enc.{l}.self"), cfg, &a, &a, segs, false, drop)?;
    let x1 = ops::add(x, &att)?;
    let (b, ln2) = ln_fwd(p, &format!("enc.{l}.ln2"), &x1)?;
    let (f, ffn) = ffn_fwd(p, &format!("enc.{l}.ffn"), &b, drop)?;
    let x2 = ops::add(&x1, &f)?;
    Ok((x2, EncLayerCache { ln1, attn, ln2, ffn }))
}

fn enc_layer_bwd(p: &Parameters, l: usize, cfg: &ModelConfig, g: &mut Parameters, c: &EncLayerCache, segs: &[Segment], dx2: &Tensor) -> Result<Tensor> {
    let db = ffn_bwd(p, g, &format!("enc.{l}.ffn"), &c.ffn, dx2)?;
    let mut dx1 = ln_bwd(p, g, &format!("enc.{l}.ln2"), &c.ln2, &db)?;
    dx1.add_assign(dx2)?;
    let (dq, mut dkv) = attention_bwd(p, g, &format!("enc.{l}.self"), cfg, &c.attn, segs, &dx1)?;
    dkv.add_assign(&dq)?;
    let mut dx = ln_bwd(p, g, &format!("enc.{l}.ln1"), &c.ln1, &dkv)?;
    dx.add_assign(&dx1)?;
    Ok(dx)
}

struct DecLayerCache {
    ln1: LayerNormCache,
    self_attn: AttnCache,
    ln2: LayerNormCache,
    cross_attn: AttnCache,
    ln3: LayerNormCache,
    ffn: FfnCache,
}

#[allow(clippy::too_many_arguments)]
fn dec_layer_fwd(
    p: &Parameters,
    l: usize,
    cfg: &ModelConfig,
    y: &Tensor,
    enc_out: &Tensor,
    self_segs: &[Segment],
    cross_segs: &[Segment],
    drop: &mut Dropout,
) -> Result<(Tensor, DecLayerCache)> {
    let (a, ln1) = ln_fwd(p, &format!("dec.{l}.ln1"), y)?;
    let (att, self_attn) = attention_fwd(p, &format!("dec.{l}.self"), cfg, &a, &a, self_segs, true, drop)?;
    let y1 = ops::add(y, &att)?;
    let (b, ln2) = ln_fwd(p, &format!("dec.{l}.ln2"), &y1)?;
    let (cr, cross_attn) = attention_fwd(p, &format!("dec.{l}.cross"), cfg, &b, enc_out, cross_segs, false, drop)?;
    let y2 = ops::add(&y1, &cr)?;
    let (c, ln3) = ln_fwd(p, &format!("dec.{l}.ln3"), &y2)?;
    let (f, ffn) = ffn_fwd(p, &format!("dec.{l}.ffn"), &c, drop)?;
    let y3 = ops::add(&y2, &f)?;
    Ok((
        y3,
        DecLayerCache {
            ln1,
            self_attn,
            ln2,
            cross_attn,
            ln3,
            ffn,
        },
    ))
}

#[allow(clippy::too_many_arguments)]
fn dec_layer_bwd(
    p: &Parameters,
    l: usize,
    cfg: &ModelConfig,
    g: &mut Parameters,
    c: &DecLayerCache,
    _enc_out: &Tensor,
    self_segs: &[Segment],
    cross_segs: &[Segment],
    dy3: &Tensor,
    d_enc_out: &mut Tensor,
) -> Result<Tensor> {
    let dc = ffn_bwd(p, g, &format!("dec.{l}.ffn"), &c.ffn, dy3)?;
    let mut dy2 = ln_bwd(p, g, &format!("dec.{l}.ln3"), &c.ln3, &dc)?;
    dy2.add_assign(dy3)?;
    let (db, denc) = attention_bwd(p, g, &format!("dec.{l}.cross"), cfg, &c.cross_attn, cross_segs, &dy2)?;
    d_enc_out.add_assign(&denc)?;
    let mut dy1 = ln_bwd(p, g, &format!("dec.{l}.ln2"), &c.ln2, &db)?;
    dy1.add_assign(&dy2)?;
    let (dq, mut dkv) = attention_bwd(p, g, &format!("dec.{l}.self"), cfg, &c.self_attn, self_segs, &dy1)?;
    dkv.add_assign(&dq)?;
    let mut dy = ln_bwd(p, g, &format!("dec.{l}.ln1"), &c.ln1, &dkv)?;
    dy.add_assign(&dy1)?;
    Ok(dy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{grad_check, FnObjective};

    fn vocab(n_words: usize) -> Arc<Vocabulary> {
        Arc::new(Vocabulary::from_tokens((0..n_words).map(|i| format!("w{i}"))))
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ffn: 12,
            dropout: 0.0,
            label_smoothing: 0.0,
            max_positions: 16,
            tied_embeddings: true,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = TranslationModel::init(tiny_config(), vocab(5), 1, Direction::SourceToTarget).unwrap();
        let b = TranslationModel::init(tiny_config(), vocab(5), 1, Direction::SourceToTarget).unwrap();
        let c = TranslationModel::init(tiny_config(), vocab(5), 2, Direction::SourceToTarget).unwrap();
        assert_eq!(a.params.to_le_bytes(), b.params.to_le_bytes());
        assert_ne!(a.params.to_le_bytes(), c.params.to_le_bytes());
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = ModelConfig {
            n_heads: 3,
            ..tiny_config()
        };
        assert!(matches!(
            TranslationModel::init(cfg, vocab(3), 1, Direction::SourceToTarget),
            Err(ModelError::Config(_))
        ));
    }

    #[test]
    fn causal_masking_is_exact() {
        let m = TranslationModel::init(tiny_config(), vocab(6), 3, Direction::SourceToTarget).unwrap();
        let src = [4, 5, 6];
        let tgt = [7, 8, 9, 4, EOS];
        let base = m.forward_logits(&src, &tgt).unwrap();
        for j in 0..tgt.len() {
            let mut t2 = tgt;
            t2[j] = if t2[j] == 5 { 6 } else { 5 };
            let pert = m.forward_logits(&src, &t2).unwrap();
            for r in 0..=j {
                assert_eq!(base.row(r), pert.row(r), "row {r} changed when perturbing {j}");
            }
        }
    }

    #[test]
    fn zero_output_projection_gives_uniform_rows() {
        let cfg = ModelConfig {
            tied_embeddings: false,
            ..tiny_config()
        };
        let mut m = TranslationModel::init(cfg, vocab(6), 3, Direction::SourceToTarget).unwrap();
        let w = m.params.get_mut("out.w").unwrap();
        *w = Tensor::zeros(w.shape());
        let probs = ops::softmax(&m.forward_logits(&[4, 5], &[6, EOS]).unwrap());
        let v = m.vocab_size() as f64;
        assert!(probs.data().iter().all(|&p| (p - 1.0 / v).abs() < 1e-15));
    }

    #[test]
    fn uniform_model_loss_is_log_vocab() {
        let cfg = ModelConfig {
            tied_embeddings: false,
            ..tiny_config()
        };
        let mut m = TranslationModel::init(cfg, vocab(6), 3, Direction::SourceToTarget).unwrap();
        let w = m.params.get_mut("out.w").unwrap();
        *w = Tensor::zeros(w.shape());
        let batch = [Example::new(vec![4, 5], vec![6, 7, 8])];
        let (loss, _) = m.loss_and_grads(&batch, 0.0, None).unwrap();
        assert!((loss - (m.vocab_size() as f64).ln()).abs() < 1e-12);
        // Smoothing leaves a uniform model's loss unchanged.
        let (loss, _) = m.loss_and_grads(&batch, 0.1, None).unwrap();
        assert!((loss - (m.vocab_size() as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_model_has_zero_loss() {
        let logp = Tensor::new(vec![2, 3], vec![-1e3, 0.0, -1e3, -1e3, -1e3, 0.0]).unwrap();
        let (loss, count) = smoothed_loss(&logp, &[1, 2], 0.0);
        assert_eq!(loss, 0.0);
        assert_eq!(count, 2);
    }

    #[test]
    fn pad_labels_are_ignored() {
        let logp = ops::log_softmax(&Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 0.5, 0.1, 0.2]).unwrap());
        let (with_pad, n) = smoothed_loss(&logp, &[2, PAD], 0.1);
        let (alone, _) = smoothed_loss(&ops::slice(&logp, 0, 0, 1).unwrap(), &[2], 0.1);
        assert_eq!(n, 1);
        assert_eq!(with_pad, alone);
    }

    #[test]
    fn errors_on_bad_inputs() {
        let m = TranslationModel::init(tiny_config(), vocab(3), 3, Direction::SourceToTarget).unwrap();
        assert!(matches!(m.forward_logits(&[99], &[4]), Err(ModelError::OutOfVocab { id: 99, .. })));
        let long = vec![4; 20];
        assert!(matches!(m.forward_logits(&long, &[4]), Err(ModelError::LengthOverflow { .. })));
        assert!(matches!(m.loss_and_grads(&[], 0.0, None), Err(ModelError::EmptyBatch)));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, tied, ls) in [(11, true, 0.0), (12, false, 0.1)] {
            let cfg = ModelConfig {
                tied_embeddings: tied,
                label_smoothing: ls,
                ..tiny_config()
            };
            let m = TranslationModel::init(cfg, vocab(4), seed, Direction::SourceToTarget).unwrap();
            let batch = vec![Example::new(vec![4, 5, 6], vec![6, 7]), Example::new(vec![7], vec![4, 5, 4])];
            let obj = FnObjective {
                value: |p: &Parameters| {
                    let mm = TranslationModel { params: p.clone(), ..m.clone() };
                    mm.loss_and_grads(&batch, ls, None).unwrap().0
                },
                grad: |p: &Parameters| {
                    let mm = TranslationModel { params: p.clone(), ..m.clone() };
                    mm.loss_and_grads(&batch, ls, None).unwrap()
                },
            };
            let report = grad_check(&obj, &m.params, 1e-5, 1e-4).unwrap();
            assert!(report.passed(), "{:?}", &report.flagged[..report.flagged.len().min(5)]);
        }
    }

    #[test]
    fn logits_are_pinned() {
        use sha2::{Digest, Sha256};
        let m = TranslationModel::init(tiny_config(), vocab(5), 42, Direction::SourceToTarget).unwrap();
        let logits = m.forward_logits(&[4, 5, 6, 7], &[8, 4, 2]).unwrap();
        let bytes: Vec<u8> = logits.data().iter().flat_map(|x| x.to_le_bytes()).collect();
        let digest: String = Sha256::digest(&bytes)[..8].iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(digest, "619fa67a60952f01");
    }

    #[test]
    fn dropout_changes_loss_only_with_rng() {
        let cfg = ModelConfig {
            dropout: 0.3,
            ..tiny_config()
        };
        let m = TranslationModel::init(cfg, vocab(4), 5, Direction::SourceToTarget).unwrap();
        let batch = [Example::new(vec![4, 5], vec![6, 7])];
        let (a, _) = m.loss_and_grads(&batch, 0.0, None).unwrap();
        let (b, _) = m.loss_and_grads(&batch, 0.0, None).unwrap();
        assert_eq!(a, b);
        let (c, _) = m.loss_and_grads(&batch, 0.0, Some(&mut Rng::new(1))).unwrap();
        assert_ne!(a, c);
    }
}
