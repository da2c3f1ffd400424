//! Next-token pretraining of the backbone on a plain-text corpus.
//!
//! Each training sequence is a document placed after a random-length run of
//! tokens taken from the end of another document, so the model sees
//! documents at many absolute offsets and learns to ignore leading context.
//! Loss is taken only on the document's own tokens.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::cross_entropy;
use crate::model::{FrozenModel, KvCache, ModelConfig, Segment, Transformer};
use crate::optim::{clip_global_norm, lr_schedule, Adam};
use crate::real::Real;
use crate::tokenizer::{default_specials, TokenId, Tokenizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    /// `vocab_size` bounds the tokenizer; the model uses the size it ends up with.
    pub model: ModelConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub min_lr_frac: f64,
    pub clip: f64,
    /// Largest number of leading filler tokens before a document.
    pub max_offset: usize,
    /// Fraction of documents held out for evaluation.
    pub heldout_frac: f64,
    pub eval_every: usize,
    /// Held-out documents scored per evaluation.
    pub eval_docs: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            model: ModelConfig::default(),
            steps: 2000,
            batch_size: 8,
            lr: 3e-3,
            warmup: 100,
            min_lr_frac: 0.1,
            clip: 1.0,
            max_offset: 64,
            heldout_frac: 0.02,
            eval_every: 100,
            eval_docs: 32,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// `(step, mean batch loss)` for every step.
    pub train_loss: Vec<(usize, f64)>,
    /// `(step, mean held-out loss)` at each evaluation.
    pub heldout_loss: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainProgress {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub heldout: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum PretrainError {
    #[error(transparent)]
    Core(#[from] Error),
    /// Loss became non-finite; `last_good` holds the weights from before the
    /// offending step.
    #[error("pretraining diverged at step {step}")]
    Diverged { step: usize, last_good: Box<FrozenModel> },
}

/// Mean next-token loss over `doc` when it follows `filler`, accumulating
/// parameter gradients (scaled by `scale`) when `grads` is given.
pub fn document_loss<T: Real>(
    model: &Transformer<T>,
    filler: &[TokenId],
    doc: &[TokenId],
    scale: T,
    grads: Option<&mut [T]>,
) -> Result<T> {
    let mut ids = Vec::with_capacity(filler.len() + doc.len());
    ids.extend_from_slice(filler);
    ids.extend_from_slice(doc);
    let first = filler.len().saturating_sub(1);
    if ids.len() < 2 || first >= ids.len() - 1 {
        return Err(Error::Empty("document needs at least two tokens"));
    }
    let d = model.config.d_model;
    let past = KvCache::new(&model.config);
    let act = model.forward_segment(Segment::tokens(&ids), &past)?;
    let n = (ids.len() - 1 - first) as f64;
    let inv = T::from_f64(1.0 / n);
    let mut total = T::ZERO;
    let Some(grads) = grads else {
        for t in first..ids.len() - 1 {
            total += cross_entropy(&model.logits(&act.hidden[t * d..(t + 1) * d]), ids[t + 1]).0;
        }
        return Ok(total * inv);
    };
    let mut dh = vec![T::ZERO; ids.len() * d];
    let w = scale * inv;
    for t in first..ids.len() - 1 {
        let row = &act.hidden[t * d..(t + 1) * d];
        let (loss, mut dl) = cross_entropy(&model.logits(row), ids[t + 1]);
        total += loss;
        for g in &mut dl {
            *g *= w;
        }
        let g = model.logits_backward(row, &dl, Some(grads));
        dh[t * d..(t + 1) * d].copy_from_slice(&g);
    }
    let sg = model.backward_segment(&act, &past, dh, None, Some(grads));
    model.accumulate_embedding_grads(0, &ids, 0, &sg.d_x0, grads);
    Ok(total * inv)
}

/// Train a tokenizer and a backbone from scratch on `corpus` documents.
pub fn pretrain_backbone(
    corpus: &[String],
    config: &PretrainConfig,
    seed: u64,
    progress: &mut dyn FnMut(&PretrainProgress),
) -> core::result::Result<(FrozenModel, PretrainReport), PretrainError> {
    if corpus.len() < 2 {
        return Err(Error::Insufficient { needed: 2, available: corpus.len() }.into());
    }
    if config.batch_size == 0 || config.steps == 0 {
        return Err(Error::invalid("steps and batch_size must be positive").into());
    }
    let mut joined = String::new();
    for doc in corpus {
        joined.push_str(doc);
        joined.push('\n');
    }
    let tokenizer = Tokenizer::train(&joined, &default_specials(), config.model.vocab_size)?;
    let mut mc = config.model;
    mc.vocab_size = tokenizer.vocab_size();
    mc.validate()?;

    let max_doc = mc.context_len.saturating_sub(config.max_offset);
    if max_doc < 2 {
        return Err(Error::invalid("max_offset leaves no room for documents").into());
    }
    let mut docs: Vec<Vec<TokenId>> = corpus
        .iter()
        .map(|d| {
            let mut ids = tokenizer.encode(d);
            ids.truncate(max_doc);
            ids
        })
        .filter(|ids| ids.len() >= 2)
        .collect();
    if docs.len() < 2 {
        return Err(Error::Insufficient { needed: 2, available: docs.len() }.into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_held = ((docs.len() as f64 * config.heldout_frac) as usize).min(docs.len() - 1);
    let held: Vec<Vec<TokenId>> = docs.split_off(docs.len() - n_held);

    let mut model = Transformer::<f32>::init(mc, seed)?;
    let mut adam = Adam::new(model.params.len());
    let mut grads = vec![0.0f32; model.params.len()];
    let mut report = PretrainReport::default();
    let scale = 1.0 / config.batch_size as f32;

    for step in 0..config.steps {
        grads.iter_mut().for_each(|g| *g = 0.0);
        let mut batch_loss = 0.0f64;
        for _ in 0..config.batch_size {
            let doc = &docs[rng.random_range(0..docs.len())];
            let off = rng.random_range(0..=config.max_offset);
            let other = &docs[rng.random_range(0..docs.len())];
            let filler = &other[other.len().saturating_sub(off)..];
            batch_loss += document_loss(&model, filler, doc, scale, Some(&mut grads))? as f64;
        }
        batch_loss /= config.batch_size as f64;
        if !batch_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            let tok = tokenizer.clone();
            return Err(PretrainError::Diverged { step, last_good: Box::new(FrozenModel::freeze(model, tok)?) });
        }
        clip_global_norm(&mut grads, config.clip);
        let lr = lr_schedule(config.lr, step, config.steps, config.warmup, config.min_lr_frac);
        adam.update(&mut model.params, &grads, lr);
        report.train_loss.push((step, batch_loss));

        let heldout = if !held.is_empty() && config.eval_every > 0 && ((step + 1) % config.eval_every == 0 || step + 1 == config.steps) {
            let n = held.len().min(config.eval_docs.max(1));
            let mut s = 0.0;
            for doc in &held[..n] {
                s += document_loss(&model, &[], doc, 1.0, None)? as f64;
            }
            let h = s / n as f64;
            report.heldout_loss.push((step + 1, h));
            Some(h)
        } else {
            None
        };
        progress(&PretrainProgress { step, loss: batch_loss, lr, heldout });
    }
    Ok((FrozenModel::freeze(model, tokenizer)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny64() -> Transformer<f64> {
        let cfg = ModelConfig { n_layers: 2, n_heads: 2, d_model: 8, d_ff: 16, context_len: 16, vocab_size: 12 };
        let mut t = Transformer::<f64>::init(cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for x in &mut t.params {
            *x += rng.random_range(-0.3..0.3);
        }
        t
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let mut t = tiny64();
        let filler = [3u32, 4];
        let doc = [5u32, 1, 7, 2, 9];
        let mut g = vec![0.0; t.params.len()];
        document_loss(&t, &filler, &doc, 1.0, Some(&mut g)).unwrap();
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut worst = 0.0f64;
        for _ in 0..300 {
            let i = rng.random_range(0..t.params.len());
            let orig = t.params[i];
            t.params[i] = orig + h;
            let up = document_loss(&t, &filler, &doc, 1.0, None).unwrap();
            t.params[i] = orig - h;
            let down = document_loss(&t, &filler, &doc, 1.0, None).unwrap();
            t.params[i] = orig;
            let num = (up - down) / (2.0 * h);
            let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn two_segment_backward_equals_single_segment() {
        let t = tiny64();
        let d = t.config.d_model;
        let ids = [1u32, 2, 3, 4, 5, 6, 7];
        let split = 4;
        let prefix = vec![0.05; 2 * d];
        let target = 8;

        let (_, whole) = t.prefix_gradient(&prefix, &ids, target).unwrap();

        // First segment: prefix + ids[..split], cached; second: the rest.
        let empty = KvCache::new(&t.config);
        let a1 = t.forward_segment(Segment { prefix: &prefix, ids: &ids[..split] }, &empty).unwrap();
        let mut cache = KvCache::new(&t.config);
        t.forward_append(Segment { prefix: &prefix, ids: &ids[..split] }, &mut cache).unwrap();
        let a2 = t.forward_segment(Segment::tokens(&ids[split..]), &cache).unwrap();
        let last = a2.len() - 1;
        let row = &a2.hidden[last * d..];
        let (_, dl) = cross_entropy(&t.logits(row), target);
        let mut dh = vec![0.0; a2.len() * d];
        dh[last * d..].copy_from_slice(&t.logits_backward(row, &dl, None));
        let g2 = t.backward_segment(&a2, &cache, dh, None, None);
        let g1 = t.backward_segment(&a1, &empty, vec![0.0; a1.len() * d], Some((&g2.d_past_k, &g2.d_past_v)), None);
        for (a, b) in g1.d_x0[..prefix.len()].iter().zip(&whole) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn cached_decoding_matches_full_forward() {
        let t = tiny64();
        let ids = [1u32, 2, 3, 4, 5];
        let full = t.forward(&[], &ids).unwrap();
        let mut cache = KvCache::new(&t.config);
        for (i, &id) in ids.iter().enumerate() {
            let h = t.forward_append(Segment::tokens(&[id]), &mut cache).unwrap();
            let l = t.logits(&h);
            for (a, b) in l.iter().zip(&full[i]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        cache.truncate(2);
        assert_eq!(cache.len(), 2);
    }

    #[test]
    fn pretraining_reduces_loss_and_is_deterministic() {
        let docs: Vec<String> = (0..40).map(|i| alloc::format!("<Comment> item {} </Comment> <Answer> Yes </Answer>", i % 5)).collect();
        let cfg = PretrainConfig {
            model: ModelConfig { n_layers: 1, n_heads: 2, d_model: 16, d_ff: 32, context_len: 48, vocab_size: 300 },
            steps: 60,
            batch_size: 2,
            lr: 1e-2,
            warmup: 5,
            max_offset: 8,
            heldout_frac: 0.1,
            eval_every: 30,
            ..PretrainConfig::default()
        };
        let (m1, r1) = pretrain_backbone(&docs, &cfg, 1, &mut |_| {}).unwrap();
        let (m2, _) = pretrain_backbone(&docs, &cfg, 1, &mut |_| {}).unwrap();
        assert_eq!(m1.param_bytes(), m2.param_bytes());
        let first = r1.train_loss[0].1;
        let last = r1.train_loss.last().unwrap().1;
        assert!(last < first * 0.5, "{first} -> {last}");
        assert_eq!(r1.heldout_loss.len(), 2);
        assert!(r1.heldout_loss[1].1 < first);
    }
}
