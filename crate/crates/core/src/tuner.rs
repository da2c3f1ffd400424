//! Soft-prompt tuning: a prefix of free embeddings trained with Adam on the
//! cross-entropy of the single answer token, the backbone left untouched.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::eval::{auc_roc, confusion_metrics};
use crate::lm::cross_entropy;
use crate::model::{FrozenModel, KvCache, Segment, Transformer};
use crate::optim::{clip_global_norm, Adam};
use crate::prompt::HardPrompt;
use crate::real::Real;
use crate::scorer::{answer_ids, common_prefix, context_text, Scorer, ScorerConfig};
use crate::tokenizer::TokenId;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Rows copy the embeddings of the first `n` vocabulary entries.
    #[default]
    VocabCopy,
    /// Gaussian rows matched to the token-embedding scale, drawn from the seed.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftPrompt {
    pub n: usize,
    pub d: usize,
    /// Row-major `n x d`.
    pub embeddings: Vec<f32>,
    pub init_seed: u64,
    pub step_count: u64,
}

impl SoftPrompt {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.d..(i + 1) * self.d]
    }

    pub fn is_finite(&self) -> bool {
        self.embeddings.iter().all(|x| x.is_finite())
    }

    /// Shape and finiteness checks against a backbone.
    pub fn check_against(&self, model: &FrozenModel) -> Result<()> {
        let c = model.config();
        if self.d != c.d_model || self.embeddings.len() != self.n * self.d {
            return Err(Error::invalid("soft prompt shape does not match the backbone"));
        }
        if self.n == 0 || self.n >= c.context_len {
            return Err(Error::ContextOverflow { needed: self.n + 1, limit: c.context_len });
        }
        if !self.is_finite() {
            return Err(Error::NonFinite { what: "soft prompt", position: 0 });
        }
        Ok(())
    }
}

/// Vocabulary-copy initialization; `seed` is recorded for the random mode.
pub fn init_soft_prompt(model: &FrozenModel, n: usize, seed: u64) -> Result<SoftPrompt> {
    init_soft_prompt_with(model, n, seed, InitMode::VocabCopy)
}

pub fn init_soft_prompt_with(model: &FrozenModel, n: usize, seed: u64, mode: InitMode) -> Result<SoftPrompt> {
    let c = model.config();
    if n == 0 {
        return Err(Error::Empty("soft prompt"));
    }
    if n >= c.context_len {
        return Err(Error::ContextOverflow { needed: n + 1, limit: c.context_len });
    }
    let w = model.weights();
    let d = c.d_model;
    let embeddings = match mode {
        InitMode::VocabCopy => (0..n).flat_map(|i| w.token_embedding((i % c.vocab_size) as TokenId).iter().copied()).collect(),
        InitMode::Random => {
            let table = w.p(&w.index.tok_emb);
            let mean_sq = table.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / table.len() as f64;
            let normal = Normal::new(0.0, libm::sqrt(mean_sq)).map_err(|_| Error::invalid("embedding scale"))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n * d).map(|_| normal.sample(&mut rng) as f32).collect()
        }
    };
    Ok(SoftPrompt { n, d, embeddings, init_seed: seed, step_count: 0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Evaluate on the validation slice every this many steps (0 = never).
    pub eval_every: usize,
    pub seed: u64,
    pub include_hard_prompt: bool,
    pub n_prefix: usize,
    pub init: InitMode,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            learning_rate: 0.1,
            clip_norm: 1.0,
            batch_size: 8,
            steps: 100,
            eval_every: 0,
            seed: 0,
            include_hard_prompt: true,
            n_prefix: 10,
            init: InitMode::VocabCopy,
        }
    }
}

impl TuneConfig {
    /// A zero learning rate is accepted so a step can report loss without moving.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("clip_norm must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub balanced_acc: f64,
    pub auc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean batch loss per completed step.
    pub losses: Vec<f64>,
    pub steps_per_epoch: usize,
    pub evals: Vec<EvalPoint>,
    pub wall_time_ms: Option<f64>,
}

impl TrainLog {
    /// Mean loss of each (possibly partial, final) epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        if self.steps_per_epoch == 0 {
            return Vec::new();
        }
        self.losses.chunks(self.steps_per_epoch).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TuneProgress {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub eval: Option<EvalPoint>,
}

#[derive(Debug, thiserror::Error)]
pub enum TuneError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("tuning diverged at step {step}")]
    Diverged { step: usize, last_good: Box<SoftPrompt> },
}

/// Summed loss and summed prefix gradient over several suffixes that share
/// one leading context. The shared segment (prefix rows then `shared` ids)
/// is run and backpropagated once; each suffix only costs its own tokens.
/// Each suffix is scored at its last position against its target.
pub fn shared_prefix_gradient<T: Real>(
    w: &Transformer<T>,
    prefix: &[T],
    shared: &[TokenId],
    suffixes: &[(Vec<TokenId>, TokenId)],
) -> Result<(T, Vec<T>)> {
    let d = w.config.d_model;
    let root = KvCache::new(&w.config);
    let head = if prefix.is_empty() && shared.is_empty() { None } else { Some(w.forward_segment(Segment { prefix, ids: shared }, &root)?) };
    let cache = match &head {
        Some(a) => w.cache_after(a, &root),
        None => root.clone(),
    };
    let mut total = T::ZERO;
    let mut d_k: Vec<Vec<T>> = vec![vec![T::ZERO; cache.len() * d]; w.config.n_layers];
    let mut d_v = d_k.clone();
    for (i, (ids, target)) in suffixes.iter().enumerate() {
        w.check_tokens(&[*target]).map_err(|e| Error::at(i, e))?;
        let act = w.forward_segment(Segment::tokens(ids), &cache).map_err(|e| Error::at(i, e))?;
        let last = act.len() - 1;
        let row = &act.hidden[last * d..];
        let (loss, dlogits) = cross_entropy(&w.logits(row), *target);
        if !loss.is_finite() {
            return Err(Error::at(i, Error::NonFinite { what: "loss", position: act.past_len() + last }));
        }
        total += loss;
        if head.is_none() {
            continue;
        }
        let mut dh = vec![T::ZERO; act.len() * d];
        dh[last * d..].copy_from_slice(&w.logits_backward(row, &dlogits, None));
        let g = w.backward_segment(&act, &cache, dh, None, None);
        for (acc, part) in d_k.iter_mut().zip(&g.d_past_k).chain(d_v.iter_mut().zip(&g.d_past_v)) {
            for (a, &b) in acc.iter_mut().zip(part) {
                *a += b;
            }
        }
    }
    let grad = match &head {
        Some(a) if !prefix.is_empty() => {
            let g = w.backward_segment(a, &root, vec![T::ZERO; a.len() * d], Some((&d_k, &d_v)), None);
            g.d_x0[..prefix.len()].to_vec()
        }
        _ => Vec::new(),
    };
    Ok((total, grad))
}

/// Training objective for one backbone and prompt setup.
pub struct Objective<'a> {
    model: &'a FrozenModel,
    prompt: &'a HardPrompt,
    include_hard_prompt: bool,
    shared: Vec<TokenId>,
    yes: TokenId,
    no: TokenId,
}

impl<'a> Objective<'a> {
    pub fn new(model: &'a FrozenModel, prompt: &'a HardPrompt, include_hard_prompt: bool) -> Result<Self> {
        let (yes, no) = answer_ids(model)?;
        let shared_text = if include_hard_prompt { prompt.render_prefix()? } else { String::new() };
        let shared = model.tokenizer().encode(&shared_text);
        Ok(Objective { model, prompt, include_hard_prompt, shared, yes, no })
    }

    pub fn context_ids(&self, comment: &str) -> Result<Vec<TokenId>> {
        Ok(self.model.tokenizer().encode(&context_text(self.prompt, self.include_hard_prompt, comment)?))
    }

    /// Mean loss and mean prefix gradient over a batch. Errors name the item.
    pub fn loss_and_grad(&self, soft: &SoftPrompt, batch: &[&LabeledExample]) -> Result<(f64, Vec<f32>)> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let limit = self.model.config().context_len;
        let mut full = Vec::with_capacity(batch.len());
        for (i, ex) in batch.iter().enumerate() {
            let ids = self.context_ids(&ex.comment).map_err(|e| Error::at(i, e))?;
            let needed = soft.n + ids.len();
            if needed > limit {
                return Err(Error::at(i, Error::ContextOverflow { needed, limit }));
            }
            full.push((ids, if ex.toxic { self.yes } else { self.no }));
        }
        let k = full.iter().map(|(ids, _)| common_prefix(ids, &self.shared).min(ids.len() - 1)).min().unwrap_or(0);
        let suffixes: Vec<(Vec<TokenId>, TokenId)> = full.into_iter().map(|(ids, t)| (ids[k..].to_vec(), t)).collect();
        let (loss, mut grad) = shared_prefix_gradient(self.model.weights(), &soft.embeddings, &self.shared[..k], &suffixes)?;
        let inv = 1.0 / batch.len() as f32;
        grad.iter_mut().for_each(|g| *g *= inv);
        Ok((loss as f64 / batch.len() as f64, grad))
    }
}

/// One optimizer step. Returns the mean batch loss (before the update) and
/// the unclipped gradient norm.
pub fn tune_step(
    objective: &Objective<'_>,
    soft: &mut SoftPrompt,
    batch: &[&LabeledExample],
    adam: &mut Adam,
    config: &TuneConfig,
) -> Result<(f64, f64)> {
    let (loss, mut grad) = objective.loss_and_grad(soft, batch)?;
    let norm = clip_global_norm(&mut grad, config.clip_norm);
    adam.update(&mut soft.embeddings, &grad, config.learning_rate);
    soft.step_count += 1;
    Ok((loss, norm))
}

/// Balanced accuracy and AUC of `soft` on `validation`, or `None` when the
/// slice lacks one class.
pub fn evaluate_soft_prompt(
    model: &FrozenModel,
    soft: &SoftPrompt,
    prompt: &HardPrompt,
    include_hard_prompt: bool,
    validation: &[LabeledExample],
) -> Result<Option<(f64, f64)>> {
    let scorer = Scorer::new(model, Some(soft), prompt, ScorerConfig { include_hard_prompt, ..ScorerConfig::default() })?;
    let mut labels = Vec::with_capacity(validation.len());
    let mut preds = Vec::with_capacity(validation.len());
    let mut scores = Vec::with_capacity(validation.len());
    for (i, ex) in validation.iter().enumerate() {
        let r = scorer.score(&ex.comment).map_err(|e| Error::at(i, e))?;
        labels.push(ex.toxic);
        preds.push(r.answer.is_yes());
        scores.push(r.score);
    }
    match (confusion_metrics(&labels, &preds), auc_roc(&labels, &scores)) {
        (Ok(c), Ok(a)) => Ok(Some((c.balanced_acc, a))),
        (Err(Error::SingleClass), _) | (_, Err(Error::SingleClass)) => Ok(None),
        (Err(e), _) | (_, Err(e)) => Err(e),
    }
}

/// Initialize and tune a soft prompt.
pub fn tune(
    model: &FrozenModel,
    prompt: &HardPrompt,
    train: &[LabeledExample],
    validation: &[LabeledExample],
    config: &TuneConfig,
    observer: Option<&mut dyn FnMut(&TuneProgress)>,
) -> core::result::Result<(SoftPrompt, TrainLog), TuneError> {
    config.validate()?;
    let start = init_soft_prompt_with(model, config.n_prefix, config.seed, config.init)?;
    let mut adam = Adam::new(start.embeddings.len());
    tune_from(model, prompt, train, validation, config, start, &mut adam, observer)
}

/// Continue tuning `soft` with existing optimizer state. Each epoch visits
/// the training set once in a seeded shuffled order; the last batch of an
/// epoch may be short.
#[allow(clippy::too_many_arguments)]
pub fn tune_from(
    model: &FrozenModel,
    prompt: &HardPrompt,
    train: &[LabeledExample],
    validation: &[LabeledExample],
    config: &TuneConfig,
    mut soft: SoftPrompt,
    adam: &mut Adam,
    mut observer: Option<&mut dyn FnMut(&TuneProgress)>,
) -> core::result::Result<(SoftPrompt, TrainLog), TuneError> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set").into());
    }
    soft.check_against(model)?;
    if adam.m.len() != soft.embeddings.len() {
        return Err(Error::LengthMismatch { left: adam.m.len(), right: soft.embeddings.len() }.into());
    }
    let objective = Objective::new(model, prompt, config.include_hard_prompt)?;
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let mut log = TrainLog { steps_per_epoch, ..TrainLog::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for step in 0..config.steps {
        let slot = step % steps_per_epoch;
        if slot == 0 {
            order.shuffle(&mut rng);
        }
        let idx = &order[slot * config.batch_size..((slot + 1) * config.batch_size).min(train.len())];
        let batch: Vec<&LabeledExample> = idx.iter().map(|&i| &train[i]).collect();
        let last_good = soft.clone();
        let (loss, grad_norm) = match tune_step(&objective, &mut soft, &batch, adam, config) {
            Ok(r) => r,
            Err(Error::NonFinite { .. }) => return Err(TuneError::Diverged { step, last_good: Box::new(last_good) }),
            Err(Error::Item { error, .. }) if matches!(*error, Error::NonFinite { .. }) => {
                return Err(TuneError::Diverged { step, last_good: Box::new(last_good) })
            }
            Err(Error::Item { index, error }) => return Err(Error::at(idx[index], *error).into()),
            Err(e) => return Err(e.into()),
        };
        if !loss.is_finite() || !soft.is_finite() {
            return Err(TuneError::Diverged { step, last_good: Box::new(last_good) });
        }
        log.losses.push(loss);
        let done = step + 1;
        let mut eval = None;
        if config.eval_every > 0 && (done % config.eval_every == 0 || done == config.steps) && !validation.is_empty() {
            if let Some((balanced_acc, auc)) = evaluate_soft_prompt(model, &soft, prompt, config.include_hard_prompt, validation)? {
                let p = EvalPoint { step: done, balanced_acc, auc };
                log.evals.push(p);
                eval = Some(p);
            }
        }
        if let Some(obs) = observer.as_deref_mut() {
            obs(&TuneProgress { step: done, loss, grad_norm, eval });
        }
    }
    Ok((soft, log))
}
