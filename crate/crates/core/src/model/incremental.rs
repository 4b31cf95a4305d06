//! Token-at-a-time decoding with cached keys and values.

use std::sync::Arc;

use crate::numerics::ops;
use crate::numerics::Tensor;
use crate::tokenizer::{TokenId, BOS, EOS};

use super::transformer::{param, positional_table, TranslationModel};
use super::{ModelError, Result};

/// Encoder output for one source sentence with per-layer cross-attention
/// keys and values.
#[derive(Debug)]
pub struct EncodedSource {
    cross_k: Vec<Tensor>,
    cross_v: Vec<Tensor>,
    pe: Arc<Tensor>,
    src_len: usize,
}

impl EncodedSource {
    /// Source length including the appended EOS.
    pub fn len(&self) -> usize {
        self.src_len
    }

    pub fn is_empty(&self) -> bool {
        self.src_len == 0
    }
}

/// Self-attention cache of one partial hypothesis.
#[derive(Clone, Debug)]
pub struct DecoderState {
    enc: Arc<EncodedSource>,
    /// Per layer, row-major `[pos, d_model]`.
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pos: usize,
}

impl DecoderState {
    /// Number of decoder inputs consumed (BOS included).
    pub fn position(&self) -> usize {
        self.pos
    }
}

impl TranslationModel {
    pub fn encode_source(&self, source_ids: &[TokenId]) -> Result<Arc<EncodedSource>> {
        self.check_ids(source_ids, 1)?;
        let enc_out = &self.encode_only(source_ids)?;
        let mut cross_k = Vec::with_capacity(self.config.n_layers);
        let mut cross_v = Vec::with_capacity(self.config.n_layers);
        for l in 0..self.config.n_layers {
            cross_k.push(linear(self, &format!("dec.{l}.cross.k"), enc_out)?);
            cross_v.push(linear(self, &format!("dec.{l}.cross.v"), enc_out)?);
        }
        Ok(Arc::new(EncodedSource {
            cross_k,
            cross_v,
            pe: Arc::new(positional_table(self.config.max_positions, self.config.d_model)),
            src_len: source_ids.len() + 1,
        }))
    }

    /// Feeds BOS and returns the state with the first next-token logits.
    pub fn begin_decode(&self, enc: &Arc<EncodedSource>) -> Result<(DecoderState, Vec<f64>)> {
        let state = DecoderState {
            enc: Arc::clone(enc),
            keys: vec![Vec::new(); self.config.n_layers],
            values: vec![Vec::new(); self.config.n_layers],
            pos: 0,
        };
        self.decode_step(state, BOS)
    }

    /// Consumes `token` and returns logits for the following position.
    pub fn decode_step(&self, mut state: DecoderState, token: TokenId) -> Result<(DecoderState, Vec<f64>)> {
        let cfg = &self.config;
        if state.pos >= cfg.max_positions {
            return Err(ModelError::LengthOverflow {
                len: state.pos + 1,
                max: cfg.max_positions,
            });
        }
        if token >= self.vocab_size() {
            return Err(ModelError::OutOfVocab {
                id: token,
                size: self.vocab_size(),
            });
        }
        let p = &self.params;
        let d = cfg.d_model;
        let emb = param(p, "embed")?.row(token);
        let pe = state.enc.pe.row(state.pos);
        let scale = (d as f64).sqrt();
        let mut x = Tensor::from_fn(&[1, d], |j| emb[j] * scale + pe[j]);
        let enc = Arc::clone(&state.enc);
        for l in 0..cfg.n_layers {
            let a = ln(self, &format!("dec.{l}.ln1"), &x)?;
            let q = linear(self, &format!("dec.{l}.self.q"), &a)?;
            let k = linear(self, &format!("dec.{l}.self.k"), &a)?;
            let v = linear(self, &format!("dec.{l}.self.v"), &a)?;
            state.keys[l].extend_from_slice(k.data());
            state.values[l].extend_from_slice(v.data());
            let n = state.pos + 1;
            let kt = Tensor::new(vec![n, d], state.keys[l].clone())?;
            let vt = Tensor::new(vec![n, d], state.values[l].clone())?;
            let heads = attend(self, &q, &kt, &vt)?;
            x = ops::add(&x, &linear(self, &format!("dec.{l}.self.o"), &heads)?)?;

            let b = ln(self, &format!("dec.{l}.ln2"), &x)?;
            let q = linear(self, &format!("dec.{l}.cross.q"), &b)?;
            let heads = attend(self, &q, &enc.cross_k[l], &enc.cross_v[l])?;
            x = ops::add(&x, &linear(self, &format!("dec.{l}.cross.o"), &heads)?)?;

            let c = ln(self, &format!("dec.{l}.ln3"), &x)?;
            let pre = linear_named(self, &format!("dec.{l}.ffn.w1"), &format!("dec.{l}.ffn.b1"), &c)?;
            let f = linear_named(self, &format!("dec.{l}.ffn.w2"), &format!("dec.{l}.ffn.b2"), &ops::relu(&pre))?;
            x = ops::add(&x, &f)?;
        }
        let h = ln(self, "dec.ln", &x)?;
        let raw = if cfg.tied_embeddings {
            ops::matmul_nt(&h, param(p, "embed")?)?
        } else {
            ops::matmul(&h, param(p, "out.w")?)?
        };
        let logits = ops::add(&raw, param(p, "out.b")?)?;
        state.pos += 1;
        Ok((state, logits.into_data()))
    }

    /// Log-probabilities of `target_ids` followed by EOS, token by token.
    pub fn score_tokens(&self, source_ids: &[TokenId], target_ids: &[TokenId]) -> Result<Vec<f64>> {
        let mut ids = target_ids.to_vec();
        ids.push(EOS);
        let logits = self.forward_logits(source_ids, &ids)?;
        let logp = ops::log_softmax(&logits);
        Ok(ids.iter().enumerate().map(|(j, &t)| logp.row(j)[t]).collect())
    }
}

fn linear(m: &TranslationModel, prefix: &str, x: &Tensor) -> Result<Tensor> {
    linear_named(m, &format!("{prefix}.w"), &format!("{prefix}.b"), x)
}

fn linear_named(m: &TranslationModel, w: &str, b: &str, x: &Tensor) -> Result<Tensor> {
    let y = ops::matmul(x, param(&m.params, w)?)?;
    match m.params.get(b) {
        Some(b) => Ok(ops::add(&y, b)?),
        None => Ok(y),
    }
}

fn ln(m: &TranslationModel, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let g = param(&m.params, &format!("{prefix}.g"))?;
    let b = param(&m.params, &format!("{prefix}.b"))?;
    Ok(ops::layer_norm(x, g, b)?.0)
}

/// Multi-head attention of a single query row over `k`/`v` (`[n, d_model]`).
fn attend(m: &TranslationModel, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let cfg = &m.config;
    let dh = cfg.head_dim();
    let n = k.rows();
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let d = cfg.d_model;
    let mut out = vec![0.0; d];
    let mut scores = vec![0.0; n];
    let mut probs = vec![0.0; n];
    for h in 0..cfg.n_heads {
        let qh = &qd[h * dh..(h + 1) * dh];
        for (i, s) in scores.iter_mut().enumerate() {
            let kh = &kd[i * d + h * dh..i * d + (h + 1) * dh];
            *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        ops::softmax_row(&scores, &mut probs);
        for (i, &pr) in probs.iter().enumerate() {
            let vh = &vd[i * d + h * dh..i * d + (h + 1) * dh];
            for (o, x) in out[h * dh..(h + 1) * dh].iter_mut().zip(vh) {
                *o += pr * x;
            }
        }
    }
    Ok(Tensor::new(vec![1, d], out)?)
}
