//! Inference and prefix-gradient operations over a frozen backbone.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FrozenModel, KvCache, Segment, Transformer};
use crate::real::{m, Real};
use crate::tokenizer::TokenId;

/// Next-token probabilities over the whole vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub probs: Vec<f64>,
}

impl Distribution {
    /// Softmax computed in f64 regardless of the logit type.
    pub fn from_logits<T: Real>(logits: &[T]) -> Self {
        let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b.to_f64()));
        let mut probs: Vec<f64> = logits.iter().map(|&l| m::exp(l.to_f64() - max)).collect();
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
        Distribution { probs }
    }

    pub fn prob(&self, id: TokenId) -> f64 {
        self.probs.get(id as usize).copied().unwrap_or(0.0)
    }

    /// Most probable token; ties go to the lowest id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as TokenId
    }
}

/// Index of the largest logit (lowest id on ties).
pub fn argmax<T: Real>(logits: &[T]) -> TokenId {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

fn prefix_slice(prefix: Option<&[f32]>) -> &[f32] {
    prefix.unwrap_or(&[])
}

pub fn next_token_distribution(model: &FrozenModel, prefix: Option<&[f32]>, context: &[TokenId]) -> Result<Distribution> {
    let w = model.weights();
    let mut cache = KvCache::new(w.config());
    let last = w.forward_append(Segment { prefix: prefix_slice(prefix), ids: context }, &mut cache)?;
    Ok(Distribution::from_logits(&w.logits(&last)))
}

/// When greedy decoding stops.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopCondition {
    pub stop_strings: Vec<String>,
    pub max_tokens: Option<usize>,
}

impl StopCondition {
    pub fn strings<I: IntoIterator<Item = S>, S: Into<String>>(stops: I, max_tokens: usize) -> Self {
        StopCondition { stop_strings: stops.into_iter().map(Into::into).collect(), max_tokens: Some(max_tokens) }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoded {
    /// Generated tokens only.
    pub tokens: Vec<TokenId>,
    pub text: String,
    /// The budget (or the context window) ran out before a stop string.
    pub truncated: bool,
}

/// Greedy (temperature 0) decoding from a populated cache whose last
/// position produced `last_hidden`.
pub fn decode_from_cache(model: &FrozenModel, cache: &mut KvCache<f32>, mut last_hidden: Vec<f32>, stop: &StopCondition) -> Result<Decoded> {
    if stop.stop_strings.is_empty() && stop.max_tokens.is_none() {
        return Err(Error::invalid("stop condition needs stop strings, a token budget, or both"));
    }
    let w = model.weights();
    let tok = model.tokenizer();
    let budget = stop.max_tokens.unwrap_or(usize::MAX);
    let mut tokens = Vec::new();
    let mut bytes = Vec::new();
    loop {
        if tokens.len() >= budget {
            let truncated = !stop.stop_strings.is_empty();
            return Ok(Decoded { text: String::from_utf8_lossy(&bytes).into_owned(), tokens, truncated });
        }
        let next = argmax(&w.logits(&last_hidden));
        tokens.push(next);
        bytes.extend_from_slice(&tok.decode_bytes(&[next]));
        let hit = stop.stop_strings.iter().any(|s| contains(&bytes, s.as_bytes()));
        if hit {
            return Ok(Decoded { text: String::from_utf8_lossy(&bytes).into_owned(), tokens, truncated: false });
        }
        if cache.len() >= w.config.context_len {
            return Ok(Decoded { text: String::from_utf8_lossy(&bytes).into_owned(), tokens, truncated: true });
        }
        last_hidden = w.forward_append(Segment::tokens(&[next]), cache)?;
    }
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    needle.is_empty() || hay.windows(needle.len()).any(|w| w == needle)
}

pub fn greedy_decode(model: &FrozenModel, prefix: Option<&[f32]>, context: &[TokenId], stop: &StopCondition) -> Result<Decoded> {
    let w = model.weights();
    let mut cache = KvCache::new(w.config());
    let last = w.forward_append(Segment { prefix: prefix_slice(prefix), ids: context }, &mut cache)?;
    decode_from_cache(model, &mut cache, last, stop)
}

/// Cross-entropy at one position and its gradient with respect to logits.
pub(crate) fn cross_entropy<T: Real>(logits: &[T], target: TokenId) -> (T, Vec<T>) {
    let max = logits.iter().fold(logits[0], |a, &b| a.max(b));
    let mut probs: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let mut sum = T::ZERO;
    for &p in &probs {
        sum += p;
    }
    let loss = sum.ln() - (logits[target as usize] - max);
    let inv = T::ONE / sum;
    for p in &mut probs {
        *p *= inv;
    }
    probs[target as usize] -= T::ONE;
    (loss, probs)
}

impl<T: Real> Transformer<T> {
    pub fn config(&self) -> &crate::model::ModelConfig {
        &self.config
    }

    /// `-log P(target | prefix, context)` and its exact gradient with respect
    /// to the prefix rows. The weights receive no gradient.
    pub fn prefix_gradient(&self, prefix: &[T], context: &[TokenId], target: TokenId) -> Result<(T, Vec<T>)> {
        self.check_tokens(&[target])?;
        let d = self.config.d_model;
        let past = KvCache::new(&self.config);
        let act = self.forward_segment(Segment { prefix, ids: context }, &past)?;
        let last = act.len() - 1;
        let row = &act.hidden[last * d..];
        let (loss, dlogits) = cross_entropy(&self.logits(row), target);
        if !loss.is_finite() {
            return Err(Error::NonFinite { what: "loss", position: act.past_len() + last });
        }
        let mut dh = vec![T::ZERO; act.len() * d];
        dh[last * d..].copy_from_slice(&self.logits_backward(row, &dlogits, None));
        let g = self.backward_segment(&act, &past, dh, None, None);
        Ok((loss, g.d_x0[..prefix.len()].to_vec()))
    }
}

/// f32 prefix gradient against the frozen backbone.
pub fn prefix_gradient(model: &FrozenModel, prefix: &[f32], context: &[TokenId], target: TokenId) -> Result<(f32, Vec<f32>)> {
    model.weights().prefix_gradient(prefix, context, target)
}

/// Outcome of comparing analytic prefix gradients with central differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Central-difference check of [`Transformer::prefix_gradient`] over every
/// prefix coordinate for each `(context, target)` pair. Relative error is
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check(
    model: &Transformer<f64>,
    prefix: &[f64],
    cases: &[(Vec<TokenId>, TokenId)],
    h: f64,
    floor: f64,
) -> Result<GradCheck> {
    let mut max_rel_error = 0.0f64;
    let mut checked = 0;
    let mut p = prefix.to_vec();
    for (ctx, target) in cases {
        let (_, analytic) = model.prefix_gradient(prefix, ctx, *target)?;
        for i in 0..p.len() {
            let orig = p[i];
            p[i] = orig + h;
            let (up, _) = model.prefix_gradient(&p, ctx, *target)?;
            p[i] = orig - h;
            let (down, _) = model.prefix_gradient(&p, ctx, *target)?;
            p[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            max_rel_error = max_rel_error.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheck { max_rel_error, checked })
}
