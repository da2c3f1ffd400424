//! Reverse-mode gradients through a forward segment.
//!
//! A segment's positions influence later segments only through their keys
//! and values. Backpropagating a later segment therefore yields gradients for
//! the earlier keys/values ([`SegmentGrad::d_past_k`] / `d_past_v`), which are
//! injected when the earlier segment is backpropagated. This lets many
//! suffixes share one forward/backward pass over a common prompt.

use alloc::vec;
use alloc::vec::Vec;

use super::forward::{gelu_grad, layer_norm, Activations, KvCache, LayerTrace, LnTrace};
use super::{LayerIndex, Transformer};
use crate::real::{axpy, dot, Real};
use crate::tokenizer::TokenId;

/// Gradients for every parameter, in the same flat layout as the weights.
pub type Gradients<T> = Vec<T>;

/// Gradients produced by backpropagating one segment.
#[derive(Clone, Debug)]
pub struct SegmentGrad<T> {
    /// Gradient with respect to the segment's input embeddings, `len x d`.
    pub d_x0: Vec<T>,
    /// Per layer, gradient with respect to the keys of positions `0..past_len`.
    pub d_past_k: Vec<Vec<T>>,
    pub d_past_v: Vec<Vec<T>>,
}

impl<T: Real> SegmentGrad<T> {
    /// Add another segment's past-key/value gradients (same past length).
    pub fn add_past(&mut self, other: &SegmentGrad<T>) {
        for (a, b) in self.d_past_k.iter_mut().zip(&other.d_past_k) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
        for (a, b) in self.d_past_v.iter_mut().zip(&other.d_past_v) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }
}

fn ln_backward<T: Real>(dy: &[T], trace: &LnTrace<T>, g: &[T], d: usize, dx: &mut [T], mut dg_db: Option<(&mut [T], &mut [T])>) {
    let rows = dy.len() / d;
    let inv_d = T::ONE / T::from_f64(d as f64);
    let mut dxhat = vec![T::ZERO; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &trace.xhat[r * d..(r + 1) * d];
        let mut m1 = T::ZERO;
        let mut m2 = T::ZERO;
        for j in 0..d {
            dxhat[j] = dyr[j] * g[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xh[j];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let rstd = trace.rstd[r];
        let out = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            out[j] += rstd * (dxhat[j] - m1 - xh[j] * m2);
        }
        if let Some((dg, db)) = dg_db.as_mut() {
            for j in 0..d {
                dg[j] += dyr[j] * xh[j];
                db[j] += dyr[j];
            }
        }
    }
}

/// Backward of `y = x W + b`: returns `dx`, accumulates `dW`, `db`.
fn linear_backward<T: Real>(
    dy: &[T],
    x: &[T],
    w: &[T],
    n_in: usize,
    n_out: usize,
    grads: Option<(&mut [T], &mut [T])>,
) -> Vec<T> {
    let rows = dy.len() / n_out;
    let mut dx = vec![T::ZERO; rows * n_in];
    for r in 0..rows {
        let dyr = &dy[r * n_out..(r + 1) * n_out];
        let dxr = &mut dx[r * n_in..(r + 1) * n_in];
        for (k, o) in dxr.iter_mut().enumerate() {
            *o = dot(dyr, &w[k * n_out..(k + 1) * n_out]);
        }
    }
    if let Some((dw, db)) = grads {
        for r in 0..rows {
            let dyr = &dy[r * n_out..(r + 1) * n_out];
            let xr = &x[r * n_in..(r + 1) * n_in];
            for (k, &xv) in xr.iter().enumerate() {
                if xv != T::ZERO {
                    axpy(&mut dw[k * n_out..(k + 1) * n_out], xv, dyr);
                }
            }
            for (b, &g) in db.iter_mut().zip(dyr) {
                *b += g;
            }
        }
    }
    dx
}

/// Borrow two disjoint ranges of the flat gradient buffer mutably.
fn pair<'a, T>(g: &'a mut [T], a: &core::ops::Range<usize>, b: &core::ops::Range<usize>) -> (&'a mut [T], &'a mut [T]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = g.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

impl<T: Real> Transformer<T> {
    /// Backpropagate one segment.
    ///
    /// `d_hidden` is the gradient on the segment's final residual stream.
    /// `inject` carries key/value gradients for this segment's own positions
    /// coming from later segments, indexed by absolute position (rows
    /// `past_len..past_len + len` are read). Parameter gradients are
    /// accumulated into `grads` when given; embedding-table gradients are left
    /// to [`Transformer::accumulate_embedding_grads`].
    pub fn backward_segment(
        &self,
        act: &Activations<T>,
        past: &KvCache<T>,
        d_hidden: Vec<T>,
        inject: Option<(&[Vec<T>], &[Vec<T>])>,
        mut grads: Option<&mut [T]>,
    ) -> SegmentGrad<T> {
        let n_layers = self.config.n_layers;
        let d = self.config.d_model;
        let mut dx = d_hidden;
        let mut d_past_k = vec![Vec::new(); n_layers];
        let mut d_past_v = vec![Vec::new(); n_layers];
        for l in (0..n_layers).rev() {
            let li = &self.index.layers[l];
            let inj = inject.map(|(k, v)| {
                let s = act.past_len * d;
                let e = s + act.len * d;
                (&k[l][s..e], &v[l][s..e])
            });
            let (dk, dv) = self.layer_backward(li, &act.layers[l], act, &past.k[l], &past.v[l], &mut dx, inj, grads.as_deref_mut());
            d_past_k[l] = dk;
            d_past_v[l] = dv;
        }
        SegmentGrad { d_x0: dx, d_past_k, d_past_v }
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_backward(
        &self,
        li: &LayerIndex,
        tr: &LayerTrace<T>,
        act: &Activations<T>,
        past_k: &[T],
        past_v: &[T],
        dx: &mut Vec<T>,
        inject: Option<(&[T], &[T])>,
        mut grads: Option<&mut [T]>,
    ) -> (Vec<T>, Vec<T>) {
        let c = &self.config;
        let d = c.d_model;
        let h = c.n_heads;
        let hd = c.head_dim();
        let len = act.len;
        let past_len = act.past_len;
        let keys = past_len + len;
        let scale = T::ONE / T::from_f64(hd as f64).sqrt();

        // MLP branch.
        let mut dact = linear_backward(
            dx,
            &tr.act,
            self.p(&li.w_proj),
            c.d_ff,
            d,
            grads.as_deref_mut().map(|g| pair(g, &li.w_proj, &li.b_proj)),
        );
        for (da, &f) in dact.iter_mut().zip(&tr.fc) {
            *da *= gelu_grad(f);
        }
        let dln2 = linear_backward(
            &dact,
            &tr.ln2_out,
            self.p(&li.w_fc),
            d,
            c.d_ff,
            grads.as_deref_mut().map(|g| pair(g, &li.w_fc, &li.b_fc)),
        );
        ln_backward(&dln2, &tr.ln2, self.p(&li.ln2_g), d, dx, grads.as_deref_mut().map(|g| pair(g, &li.ln2_g, &li.ln2_b)));

        // Attention branch; dx now holds the gradient on the post-attention residual.
        let dctx = linear_backward(dx, &tr.ctx, self.p(&li.w_o), d, d, grads.as_deref_mut().map(|g| pair(g, &li.w_o, &li.b_o)));

        let mut dqkv = vec![T::ZERO; len * 3 * d];
        let mut dpk = vec![T::ZERO; past_len * d];
        let mut dpv = vec![T::ZERO; past_len * d];
        let mut dp = vec![T::ZERO; keys];
        for head in 0..h {
            let off = head * hd;
            for i in 0..len {
                let n_keys = past_len + i + 1;
                let prow = &tr.probs[(head * len + i) * keys..(head * len + i) * keys + keys];
                let dci = &dctx[i * d + off..i * d + off + hd];
                let mut sum = T::ZERO;
                for j in 0..n_keys {
                    let v = if j < past_len {
                        &past_v[j * d + off..j * d + off + hd]
                    } else {
                        let r = j - past_len;
                        &tr.qkv[r * 3 * d + 2 * d + off..r * 3 * d + 2 * d + off + hd]
                    };
                    dp[j] = dot(dci, v);
                    sum += prow[j] * dp[j];
                    let p = prow[j];
                    if j < past_len {
                        axpy(&mut dpv[j * d + off..j * d + off + hd], p, dci);
                    } else {
                        let r = j - past_len;
                        axpy(&mut dqkv[r * 3 * d + 2 * d + off..r * 3 * d + 2 * d + off + hd], p, dci);
                    }
                }
                let q = &tr.qkv[i * 3 * d + off..i * 3 * d + off + hd];
                let mut dq = vec![T::ZERO; hd];
                for j in 0..n_keys {
                    let ds = prow[j] * (dp[j] - sum) * scale;
                    if ds == T::ZERO {
                        continue;
                    }
                    if j < past_len {
                        axpy(&mut dq, ds, &past_k[j * d + off..j * d + off + hd]);
                        axpy(&mut dpk[j * d + off..j * d + off + hd], ds, q);
                    } else {
                        let r = j - past_len;
                        axpy(&mut dq, ds, &tr.qkv[r * 3 * d + d + off..r * 3 * d + d + off + hd]);
                        axpy(&mut dqkv[r * 3 * d + d + off..r * 3 * d + d + off + hd], ds, q);
                    }
                }
                for (o, g) in dqkv[i * 3 * d + off..i * 3 * d + off + hd].iter_mut().zip(&dq) {
                    *o += *g;
                }
            }
        }
        if let Some((ik, iv)) = inject {
            for r in 0..len {
                for j in 0..d {
                    dqkv[r * 3 * d + d + j] += ik[r * d + j];
                    dqkv[r * 3 * d + 2 * d + j] += iv[r * d + j];
                }
            }
        }
        let dln1 = linear_backward(
            &dqkv,
            &tr.ln1_out,
            self.p(&li.w_qkv),
            d,
            3 * d,
            grads.as_deref_mut().map(|g| pair(g, &li.w_qkv, &li.b_qkv)),
        );
        ln_backward(&dln1, &tr.ln1, self.p(&li.ln1_g), d, dx, grads.map(|g| pair(g, &li.ln1_g, &li.ln1_b)));
        (dpk, dpv)
    }

    /// Backward of the final LayerNorm and output head for one row. Returns
    /// the gradient on the residual row.
    pub fn logits_backward(&self, hidden_row: &[T], d_logits: &[T], grads: Option<&mut [T]>) -> Vec<T> {
        let d = self.config.d_model;
        let v = self.config.vocab_size;
        let mut trace = LnTrace { xhat: vec![T::ZERO; d], rstd: vec![T::ZERO; 1] };
        let mut normed = vec![T::ZERO; d];
        let g = self.p(&self.index.lnf_g);
        layer_norm(hidden_row, g, self.p(&self.index.lnf_b), d, &mut normed, Some(&mut trace));
        let w = self.p(&self.index.w_out);
        let dnormed: Vec<T> = (0..d).map(|k| dot(d_logits, &w[k * v..(k + 1) * v])).collect();
        let mut dh = vec![T::ZERO; d];
        match grads {
            Some(gr) => {
                {
                    let dw = &mut gr[self.index.w_out.clone()];
                    for (k, &x) in normed.iter().enumerate() {
                        axpy(&mut dw[k * v..(k + 1) * v], x, d_logits);
                    }
                }
                let (dg, db) = pair(gr, &self.index.lnf_g, &self.index.lnf_b);
                ln_backward(&dnormed, &trace, g, d, &mut dh, Some((dg, db)));
            }
            None => ln_backward(&dnormed, &trace, g, d, &mut dh, None),
        }
        dh
    }

    /// Scatter input-embedding gradients into the token and position tables.
    /// Soft-prompt rows (the first `n_prefix` rows) only feed positions.
    pub fn accumulate_embedding_grads(&self, n_prefix: usize, ids: &[TokenId], start: usize, d_x0: &[T], grads: &mut [T]) {
        let d = self.config.d_model;
        let rows = n_prefix + ids.len();
        for r in 0..rows {
            let g = &d_x0[r * d..(r + 1) * d];
            let p = self.index.pos_emb.start + (start + r) * d;
            for (o, &x) in grads[p..p + d].iter_mut().zip(g) {
                *o += x;
            }
            if r >= n_prefix {
                let t = self.index.tok_emb.start + ids[r - n_prefix] as usize * d;
                for (o, &x) in grads[t..t + d].iter_mut().zip(g) {
                    *o += x;
                }
            }
        }
    }
}
