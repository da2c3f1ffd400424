//! Tiny decoder-only transformer (pre-LayerNorm, GELU MLP, learned absolute
//! positions) with a flat parameter buffer.
//!
//! All matrices are stored input-major (`[in][out]`) so `y = x W` is a run of
//! contiguous `axpy`s.

mod backward;
mod forward;

pub use backward::{Gradients, SegmentGrad};
pub use forward::{Activations, KvCache, Segment};

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tokenizer::{TokenId, Tokenizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { n_layers: 4, n_heads: 4, d_model: 128, d_ff: 512, context_len: 512, vocab_size: 512 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid("d_model must be divisible by n_heads"));
        }
        if self.context_len == 0 || self.vocab_size == 0 {
            return Err(Error::invalid("context_len and vocab_size must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Offsets of one layer's tensors inside the flat buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerIndex {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub w_qkv: Range<usize>,
    pub b_qkv: Range<usize>,
    pub w_o: Range<usize>,
    pub b_o: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w_fc: Range<usize>,
    pub b_fc: Range<usize>,
    pub w_proj: Range<usize>,
    pub b_proj: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamIndex {
    pub tok_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub layers: Vec<LayerIndex>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub w_out: Range<usize>,
    pub total: usize,
}

/// Named tensor entry, used by checkpoint headers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

impl ParamIndex {
    pub fn new(c: &ModelConfig) -> Self {
        let mut at = 0usize;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let d = c.d_model;
        let tok_emb = take(c.vocab_size * d);
        let pos_emb = take(c.context_len * d);
        let layers = (0..c.n_layers)
            .map(|_| LayerIndex {
                ln1_g: take(d),
                ln1_b: take(d),
                w_qkv: take(d * 3 * d),
                b_qkv: take(3 * d),
                w_o: take(d * d),
                b_o: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w_fc: take(d * c.d_ff),
                b_fc: take(c.d_ff),
                w_proj: take(c.d_ff * d),
                b_proj: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let w_out = take(d * c.vocab_size);
        ParamIndex { tok_emb, pos_emb, layers, lnf_g, lnf_b, w_out, total: at }
    }

    pub fn tensors(&self, c: &ModelConfig) -> Vec<TensorInfo> {
        let d = c.d_model;
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, r: &Range<usize>| {
            out.push(TensorInfo { name, shape, offset: r.start, len: r.len() })
        };
        push("tok_emb".into(), alloc::vec![c.vocab_size, d], &self.tok_emb);
        push("pos_emb".into(), alloc::vec![c.context_len, d], &self.pos_emb);
        for (i, l) in self.layers.iter().enumerate() {
            let n = |s: &str| alloc::format!("layers.{i}.{s}");
            push(n("ln1_g"), alloc::vec![d], &l.ln1_g);
            push(n("ln1_b"), alloc::vec![d], &l.ln1_b);
            push(n("w_qkv"), alloc::vec![d, 3 * d], &l.w_qkv);
            push(n("b_qkv"), alloc::vec![3 * d], &l.b_qkv);
            push(n("w_o"), alloc::vec![d, d], &l.w_o);
            push(n("b_o"), alloc::vec![d], &l.b_o);
            push(n("ln2_g"), alloc::vec![d], &l.ln2_g);
            push(n("ln2_b"), alloc::vec![d], &l.ln2_b);
            push(n("w_fc"), alloc::vec![d, c.d_ff], &l.w_fc);
            push(n("b_fc"), alloc::vec![c.d_ff], &l.b_fc);
            push(n("w_proj"), alloc::vec![c.d_ff, d], &l.w_proj);
            push(n("b_proj"), alloc::vec![d], &l.b_proj);
        }
        push("lnf_g".into(), alloc::vec![d], &self.lnf_g);
        push("lnf_b".into(), alloc::vec![d], &self.lnf_b);
        push("w_out".into(), alloc::vec![d, c.vocab_size], &self.w_out);
        out
    }
}

/// Transformer weights over a scalar type.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer<T> {
    pub config: ModelConfig,
    pub index: ParamIndex,
    pub params: Vec<T>,
}

impl<T: Real> Transformer<T> {
    /// Gaussian init (std 0.02, residual projections scaled down by
    /// `sqrt(2 * n_layers)`), unit LayerNorm gains, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let index = ParamIndex::new(&config);
        let mut params = alloc::vec![T::ZERO; index.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let normal = Normal::new(0.0, std).expect("valid std");
        let resid = Normal::new(0.0, std / libm::sqrt(2.0 * config.n_layers as f64)).expect("valid std");
        let mut fill = |p: &mut [T], dist: &Normal<f64>| {
            for x in p {
                *x = T::from_f64(dist.sample(&mut rng));
            }
        };
        fill(&mut params[index.tok_emb.clone()], &normal);
        fill(&mut params[index.pos_emb.clone()], &normal);
        for l in &index.layers {
            fill(&mut params[l.w_qkv.clone()], &normal);
            fill(&mut params[l.w_o.clone()], &resid);
            fill(&mut params[l.w_fc.clone()], &normal);
            fill(&mut params[l.w_proj.clone()], &resid);
            params[l.ln1_g.clone()].fill(T::ONE);
            params[l.ln2_g.clone()].fill(T::ONE);
        }
        params[index.lnf_g.clone()].fill(T::ONE);
        fill(&mut params[index.w_out.clone()], &normal);
        Ok(Transformer { config, index, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let index = ParamIndex::new(&config);
        if params.len() != index.total {
            return Err(Error::LengthMismatch { left: params.len(), right: index.total });
        }
        Ok(Transformer { config, index, params })
    }

    #[inline]
    pub fn p(&self, r: &Range<usize>) -> &[T] {
        &self.params[r.clone()]
    }

    pub fn token_embedding(&self, id: TokenId) -> &[T] {
        let d = self.config.d_model;
        let base = self.index.tok_emb.start + id as usize * d;
        &self.params[base..base + d]
    }

    pub fn cast<U: Real>(&self) -> Transformer<U> {
        Transformer {
            config: self.config,
            index: self.index.clone(),
            params: self.params.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|x| x.is_finite())
    }

    pub fn check_tokens(&self, ids: &[TokenId]) -> Result<()> {
        for &id in ids {
            if id as usize >= self.config.vocab_size {
                return Err(Error::TokenOutOfRange { id, vocab: self.config.vocab_size });
            }
        }
        Ok(())
    }
}

/// The frozen backbone: f32 weights plus the tokenizer they were trained with.
/// Nothing in this crate hands out mutable access once constructed.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenModel {
    weights: Transformer<f32>,
    tokenizer: Tokenizer,
}

impl FrozenModel {
    pub fn freeze(weights: Transformer<f32>, tokenizer: Tokenizer) -> Result<Self> {
        if tokenizer.vocab_size() != weights.config.vocab_size {
            return Err(Error::LengthMismatch { left: tokenizer.vocab_size(), right: weights.config.vocab_size });
        }
        if !weights.all_finite() {
            return Err(Error::NonFinite { what: "weight", position: weights.params.iter().position(|x| !x.is_finite()).unwrap_or(0) });
        }
        Ok(FrozenModel { weights, tokenizer })
    }

    pub fn weights(&self) -> &Transformer<f32> {
        &self.weights
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    /// Little-endian bytes of every parameter; the basis for backbone hashes.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.weights.params.len() * 4);
        for x in &self.weights.params {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }
}
