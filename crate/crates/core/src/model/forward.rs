use alloc::vec;
use alloc::vec::Vec;

use super::{LayerIndex, ModelConfig, Transformer};
use crate::error::{Error, Result};
use crate::real::{axpy, dot, Real};
use crate::tokenizer::TokenId;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Per-layer keys and values of every position processed so far.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    pub(crate) d: usize,
    pub(crate) k: Vec<Vec<T>>,
    pub(crate) v: Vec<Vec<T>>,
}

impl<T: Real> KvCache<T> {
    pub fn new(config: &ModelConfig) -> Self {
        KvCache { d: config.d_model, k: vec![Vec::new(); config.n_layers], v: vec![Vec::new(); config.n_layers] }
    }

    pub fn len(&self) -> usize {
        self.k.first().map(|k| k.len() / self.d).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop positions `len..`; used to rewind to a shared prompt prefix.
    pub fn truncate(&mut self, len: usize) {
        for (k, v) in self.k.iter_mut().zip(self.v.iter_mut()) {
            k.truncate(len * self.d);
            v.truncate(len * self.d);
        }
    }

    fn extend_layer(&mut self, layer: usize, k: &[T], v: &[T]) {
        self.k[layer].extend_from_slice(k);
        self.v[layer].extend_from_slice(v);
    }
}

/// The input of one forward segment: optional soft-prompt rows followed by
/// token ids, placed at absolute positions starting at `past.len()`.
#[derive(Clone, Copy, Debug)]
pub struct Segment<'a, T> {
    pub prefix: &'a [T],
    pub ids: &'a [TokenId],
}

impl<'a, T> Segment<'a, T> {
    pub fn tokens(ids: &'a [TokenId]) -> Self {
        Segment { prefix: &[], ids }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LnTrace<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerTrace<T> {
    pub ln1: LnTrace<T>,
    pub ln1_out: Vec<T>,
    /// `[q | k | v]` per row, width `3d`.
    pub qkv: Vec<T>,
    /// Attention probabilities, `[head][row][key]` with `past + len` keys.
    pub probs: Vec<T>,
    pub ctx: Vec<T>,
    pub ln2: LnTrace<T>,
    pub ln2_out: Vec<T>,
    pub fc: Vec<T>,
    pub act: Vec<T>,
}

/// Everything a backward pass needs from a forward segment.
#[derive(Clone, Debug)]
pub struct Activations<T> {
    pub(crate) past_len: usize,
    pub(crate) len: usize,
    pub(crate) layers: Vec<LayerTrace<T>>,
    /// Residual stream after the last block, `len x d`.
    pub hidden: Vec<T>,
}

impl<T> Activations<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn past_len(&self) -> usize {
        self.past_len
    }
}

pub(crate) fn layer_norm<T: Real>(x: &[T], g: &[T], b: &[T], d: usize, out: &mut [T], trace: Option<&mut LnTrace<T>>) {
    let rows = x.len() / d;
    let eps = T::from_f64(LN_EPS);
    let inv_d = T::ONE / T::from_f64(d as f64);
    let mut trace = trace;
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mut mean = T::ZERO;
        for &v in row {
            mean += v;
        }
        mean *= inv_d;
        let mut var = T::ZERO;
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_d;
        let rstd = T::ONE / (var + eps).sqrt();
        let o = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            let xh = (row[j] - mean) * rstd;
            o[j] = xh * g[j] + b[j];
            if let Some(t) = trace.as_deref_mut() {
                t.xhat[r * d + j] = xh;
            }
        }
        if let Some(t) = trace.as_deref_mut() {
            t.rstd[r] = rstd;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + three * a * x * x)
}

/// `out[rows x n_out] = x[rows x n_in] W[n_in x n_out] + b`
pub(crate) fn linear<T: Real>(x: &[T], w: &[T], b: &[T], n_in: usize, n_out: usize, out: &mut [T]) {
    let rows = x.len() / n_in;
    for r in 0..rows {
        let o = &mut out[r * n_out..(r + 1) * n_out];
        o.copy_from_slice(b);
        let xr = &x[r * n_in..(r + 1) * n_in];
        for (k, &xv) in xr.iter().enumerate() {
            if xv != T::ZERO {
                axpy(o, xv, &w[k * n_out..(k + 1) * n_out]);
            }
        }
    }
}

impl<T: Real> Transformer<T> {
    /// Token (or soft-prompt) embeddings plus positions for a segment.
    pub fn embed(&self, seg: Segment<'_, T>, start: usize) -> Result<Vec<T>> {
        let d = self.config.d_model;
        if !seg.prefix.len().is_multiple_of(d) {
            return Err(Error::invalid("prefix length is not a multiple of d_model"));
        }
        let n_prefix = seg.prefix.len() / d;
        let len = n_prefix + seg.ids.len();
        if len == 0 {
            return Err(Error::Empty("segment has neither prefix nor tokens"));
        }
        if start + len > self.config.context_len {
            return Err(Error::ContextOverflow { needed: start + len, limit: self.config.context_len });
        }
        self.check_tokens(seg.ids)?;
        let mut x = vec![T::ZERO; len * d];
        x[..seg.prefix.len()].copy_from_slice(seg.prefix);
        for (i, &id) in seg.ids.iter().enumerate() {
            x[(n_prefix + i) * d..(n_prefix + i + 1) * d].copy_from_slice(self.token_embedding(id));
        }
        let pos = self.p(&self.index.pos_emb);
        for r in 0..len {
            let p = start + r;
            for j in 0..d {
                x[r * d + j] += pos[p * d + j];
            }
        }
        Ok(x)
    }

    /// Run a segment after `past`, keeping traces for backpropagation.
    /// `past` is not modified; the segment's own keys/values live in the
    /// returned activations.
    pub fn forward_segment(&self, seg: Segment<'_, T>, past: &KvCache<T>) -> Result<Activations<T>> {
        let x = self.embed(seg, past.len())?;
        Ok(self.run(x, past, true).0)
    }

    /// Keys/values of a traced segment appended to a copy of `past`.
    pub fn cache_after(&self, act: &Activations<T>, past: &KvCache<T>) -> KvCache<T> {
        let d = self.config.d_model;
        let mut cache = past.clone();
        for (l, tr) in act.layers.iter().enumerate() {
            for r in 0..act.len {
                let row = &tr.qkv[r * 3 * d..(r + 1) * 3 * d];
                cache.extend_layer(l, &row[d..2 * d], &row[2 * d..]);
            }
        }
        cache
    }

    /// Run a segment and append its keys/values to `cache`. Returns the final
    /// residual stream of the segment's last position.
    pub fn forward_append(&self, seg: Segment<'_, T>, cache: &mut KvCache<T>) -> Result<Vec<T>> {
        let x = self.embed(seg, cache.len())?;
        let (act, kv) = self.run(x, cache, false);
        for (l, (k, v)) in kv.into_iter().enumerate() {
            cache.extend_layer(l, &k, &v);
        }
        let d = self.config.d_model;
        Ok(act.hidden[(act.len - 1) * d..].to_vec())
    }

    fn run(&self, mut x: Vec<T>, past: &KvCache<T>, keep: bool) -> (Activations<T>, Vec<(Vec<T>, Vec<T>)>) {
        let c = &self.config;
        let d = c.d_model;
        let len = x.len() / d;
        let past_len = past.len();
        let mut layers = Vec::with_capacity(if keep { c.n_layers } else { 0 });
        let mut kv_out = Vec::with_capacity(if keep { 0 } else { c.n_layers });
        for (l, li) in self.index.layers.iter().enumerate() {
            let trace = self.layer_forward(li, &mut x, len, &past.k[l], &past.v[l], past_len);
            if keep {
                layers.push(trace);
            } else {
                let mut k = vec![T::ZERO; len * d];
                let mut v = vec![T::ZERO; len * d];
                for r in 0..len {
                    k[r * d..(r + 1) * d].copy_from_slice(&trace.qkv[r * 3 * d + d..r * 3 * d + 2 * d]);
                    v[r * d..(r + 1) * d].copy_from_slice(&trace.qkv[r * 3 * d + 2 * d..r * 3 * d + 3 * d]);
                }
                kv_out.push((k, v));
            }
        }
        (Activations { past_len, len, layers, hidden: x }, kv_out)
    }

    fn layer_forward(&self, li: &LayerIndex, x: &mut [T], len: usize, past_k: &[T], past_v: &[T], past_len: usize) -> LayerTrace<T> {
        let c = &self.config;
        let d = c.d_model;
        let h = c.n_heads;
        let hd = c.head_dim();
        let keys = past_len + len;
        let scale = T::ONE / T::from_f64(hd as f64).sqrt();

        let mut ln1 = LnTrace { xhat: vec![T::ZERO; len * d], rstd: vec![T::ZERO; len] };
        let mut ln1_out = vec![T::ZERO; len * d];
        layer_norm(x, self.p(&li.ln1_g), self.p(&li.ln1_b), d, &mut ln1_out, Some(&mut ln1));
        let mut qkv = vec![T::ZERO; len * 3 * d];
        linear(&ln1_out, self.p(&li.w_qkv), self.p(&li.b_qkv), d, 3 * d, &mut qkv);

        let mut probs = vec![T::ZERO; h * len * keys];
        let mut ctx = vec![T::ZERO; len * d];
        let mut scores = vec![T::ZERO; keys];
        for head in 0..h {
            let off = head * hd;
            for i in 0..len {
                let q = &qkv[i * 3 * d + off..i * 3 * d + off + hd];
                let n_keys = past_len + i + 1;
                let mut max = T::from_f64(f64::NEG_INFINITY);
                for (j, s) in scores[..n_keys].iter_mut().enumerate() {
                    let k = if j < past_len {
                        &past_k[j * d + off..j * d + off + hd]
                    } else {
                        let r = j - past_len;
                        &qkv[r * 3 * d + d + off..r * 3 * d + d + off + hd]
                    };
                    *s = dot(q, k) * scale;
                    max = max.max(*s);
                }
                let mut sum = T::ZERO;
                for s in scores[..n_keys].iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let inv = T::ONE / sum;
                let prow = &mut probs[(head * len + i) * keys..(head * len + i) * keys + keys];
                let out = &mut ctx[i * d + off..i * d + off + hd];
                for j in 0..n_keys {
                    let p = scores[j] * inv;
                    prow[j] = p;
                    let v = if j < past_len {
                        &past_v[j * d + off..j * d + off + hd]
                    } else {
                        let r = j - past_len;
                        &qkv[r * 3 * d + 2 * d + off..r * 3 * d + 2 * d + off + hd]
                    };
                    axpy(out, p, v);
                }
            }
        }

        let mut attn = vec![T::ZERO; len * d];
        linear(&ctx, self.p(&li.w_o), self.p(&li.b_o), d, d, &mut attn);
        for (xi, a) in x.iter_mut().zip(&attn) {
            *xi += *a;
        }

        let mut ln2 = LnTrace { xhat: vec![T::ZERO; len * d], rstd: vec![T::ZERO; len] };
        let mut ln2_out = vec![T::ZERO; len * d];
        layer_norm(x, self.p(&li.ln2_g), self.p(&li.ln2_b), d, &mut ln2_out, Some(&mut ln2));
        let mut fc = vec![T::ZERO; len * c.d_ff];
        linear(&ln2_out, self.p(&li.w_fc), self.p(&li.b_fc), d, c.d_ff, &mut fc);
        let act: Vec<T> = fc.iter().map(|&v| gelu(v)).collect();
        let mut mlp = vec![T::ZERO; len * d];
        linear(&act, self.p(&li.w_proj), self.p(&li.b_proj), c.d_ff, d, &mut mlp);
        for (xi, m) in x.iter_mut().zip(&mlp) {
            *xi += *m;
        }

        LayerTrace { ln1, ln1_out, qkv, probs, ctx, ln2, ln2_out, fc, act }
    }

    /// Final LayerNorm and output head for one residual row.
    pub fn logits(&self, hidden_row: &[T]) -> Vec<T> {
        let d = self.config.d_model;
        let v = self.config.vocab_size;
        let mut normed = vec![T::ZERO; d];
        layer_norm(hidden_row, self.p(&self.index.lnf_g), self.p(&self.index.lnf_b), d, &mut normed, None);
        let mut out = vec![T::ZERO; v];
        let w = self.p(&self.index.w_out);
        for (k, &x) in normed.iter().enumerate() {
            axpy(&mut out, x, &w[k * v..(k + 1) * v]);
        }
        out
    }

    /// Logits at every position of a single-segment forward pass.
    pub fn forward(&self, prefix: &[T], ids: &[TokenId]) -> Result<Vec<Vec<T>>> {
        let past = KvCache::new(&self.config);
        let act = self.forward_segment(Segment { prefix, ids }, &past)?;
        let d = self.config.d_model;
        Ok((0..act.len).map(|r| self.logits(&act.hidden[r * d..(r + 1) * d])).collect())
    }
}
