//! Yes/No scoring and full classifications.
//!
//! The score is read from the next-token distribution right after the
//! answer tag: `p_yes` and `p_no` are the probabilities of the spaced answer
//! tokens, and the primary score renormalizes over just those two.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{decode_from_cache, Distribution, StopCondition};
use crate::model::{FrozenModel, KvCache, Segment};
use crate::parser::{parse, validate_grounding, GroundingReport, ParsedResponse};
use crate::prompt::{render_query, Answer, HardPrompt};
use crate::tokenizer::TokenId;
use crate::tuner::SoftPrompt;

pub const YES_TOKEN: &str = " Yes";
pub const NO_TOKEN: &str = " No";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    pub p_yes: f64,
    pub p_no: f64,
    /// `p_yes + p_no`.
    pub mass: f64,
    /// `p_yes / mass`.
    pub score: f64,
    /// `|score - 0.5| * 2`.
    pub certainty: f64,
    /// Yes iff `score > 0.5`; an exact tie is No.
    pub answer: Answer,
}

impl ScoreResult {
    pub fn from_probs(p_yes: f64, p_no: f64) -> Self {
        let mass = p_yes + p_no;
        let score = if mass > 0.0 { p_yes / mass } else { 0.5 };
        let certainty = ((score - 0.5).abs() * 2.0).min(1.0);
        ScoreResult { p_yes, p_no, mass, score, certainty, answer: Answer::from_bool(score > 0.5) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub score: ScoreResult,
    pub parsed: ParsedResponse,
    pub grounding: GroundingReport,
    /// Generated text after the prompt.
    pub generation: String,
    /// Decoding hit its token budget or the context window before a stop string.
    pub truncated: bool,
    /// Filled in by callers that can measure time.
    #[serde(default)]
    pub latency_ms: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerConfig {
    pub max_new_tokens: usize,
    /// When false only the soft prompt and the query block form the context.
    pub include_hard_prompt: bool,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig { max_new_tokens: 128, include_hard_prompt: true }
    }
}

/// Token ids of the spaced Yes/No answer tokens.
pub fn answer_ids(model: &FrozenModel) -> Result<(TokenId, TokenId)> {
    let t = model.tokenizer();
    match (t.special_id(YES_TOKEN), t.special_id(NO_TOKEN)) {
        (Some(y), Some(n)) => Ok((y, n)),
        _ => Err(Error::invalid("tokenizer lacks the answer tokens")),
    }
}

/// Number of leading tokens two sequences share.
pub fn common_prefix(a: &[TokenId], b: &[TokenId]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// The rendered prompt for a comment, or only its query block when the hard
/// prompt is left out.
pub fn context_text(prompt: &HardPrompt, include_hard_prompt: bool, comment: &str) -> Result<String> {
    if include_hard_prompt {
        prompt.render(comment)
    } else if comment.is_empty() {
        Err(Error::Empty("comment"))
    } else {
        Ok(render_query(comment, prompt.variant, prompt.spacing))
    }
}

/// Scores and classifies comments against one prompt setup. The soft prompt
/// and the part of the hard prompt shared by all comments are run once.
/// `M` is any handle to the backbone (`&FrozenModel`, `Arc<FrozenModel>`).
pub struct Scorer<M: Deref<Target = FrozenModel>> {
    model: M,
    prompt: HardPrompt,
    soft: Option<SoftPrompt>,
    config: ScorerConfig,
    shared: Vec<TokenId>,
    base: KvCache<f32>,
    yes: TokenId,
    no: TokenId,
}

impl<M: Deref<Target = FrozenModel>> Scorer<M> {
    pub fn new(model: M, soft: Option<&SoftPrompt>, prompt: &HardPrompt, config: ScorerConfig) -> Result<Self> {
        let (yes, no) = answer_ids(&model)?;
        if let Some(s) = soft {
            s.check_against(&model)?;
        }
        let shared_text = if config.include_hard_prompt { prompt.render_prefix()? } else { String::new() };
        let shared = model.tokenizer().encode(&shared_text);
        let w = model.weights();
        let prefix: &[f32] = soft.map(|s| s.embeddings.as_slice()).unwrap_or(&[]);
        let limit = w.config.context_len;
        if prefix.len() / w.config.d_model + shared.len() >= limit {
            return Err(Error::ContextOverflow { needed: prefix.len() / w.config.d_model + shared.len() + 1, limit });
        }
        let mut base = KvCache::new(w.config());
        if !prefix.is_empty() || !shared.is_empty() {
            w.forward_append(Segment { prefix, ids: &shared }, &mut base)?;
        }
        Ok(Scorer { prompt: prompt.clone(), soft: soft.cloned(), config, shared, base, yes, no, model })
    }

    pub fn model(&self) -> &FrozenModel {
        &self.model
    }

    pub fn prompt(&self) -> &HardPrompt {
        &self.prompt
    }

    pub fn soft_prompt(&self) -> Option<&SoftPrompt> {
        self.soft.as_ref()
    }

    pub fn config(&self) -> ScorerConfig {
        self.config
    }

    fn n_prefix(&self) -> usize {
        self.soft.as_ref().map_or(0, |s| s.n)
    }

    /// Full context text (without the soft prompt) for a comment.
    pub fn context_text(&self, comment: &str) -> Result<String> {
        context_text(&self.prompt, self.config.include_hard_prompt, comment)
    }

    pub fn context_ids(&self, comment: &str) -> Result<Vec<TokenId>> {
        Ok(self.model.tokenizer().encode(&self.context_text(comment)?))
    }

    /// Run the comment-specific tail; returns the cache and the hidden state
    /// at the answer position.
    fn run(&self, comment: &str) -> Result<(KvCache<f32>, Vec<f32>)> {
        let ids = self.context_ids(comment)?;
        let limit = self.model.config().context_len;
        let needed = self.n_prefix() + ids.len();
        if needed > limit {
            return Err(Error::ContextOverflow { needed, limit });
        }
        let k = common_prefix(&ids, &self.shared).min(ids.len() - 1);
        let mut cache = self.base.clone();
        cache.truncate(self.n_prefix() + k);
        let last = self.model.weights().forward_append(Segment::tokens(&ids[k..]), &mut cache)?;
        Ok((cache, last))
    }

    pub fn distribution(&self, comment: &str) -> Result<Distribution> {
        let (_, last) = self.run(comment)?;
        Ok(Distribution::from_logits(&self.model.weights().logits(&last)))
    }

    pub fn score(&self, comment: &str) -> Result<ScoreResult> {
        let d = self.distribution(comment)?;
        Ok(ScoreResult::from_probs(d.prob(self.yes), d.prob(self.no)))
    }

    pub fn classify(&self, comment: &str) -> Result<Classification> {
        let (mut cache, last) = self.run(comment)?;
        let d = Distribution::from_logits(&self.model.weights().logits(&last));
        let score = ScoreResult::from_probs(d.prob(self.yes), d.prob(self.no));
        let stop = StopCondition { stop_strings: self.prompt.stop_strings(), max_tokens: Some(self.config.max_new_tokens) };
        let decoded = decode_from_cache(&self.model, &mut cache, last, &stop)?;
        let parsed = parse(&decoded.text, self.prompt.format());
        let grounding = validate_grounding(&parsed, comment, &self.prompt.guideline);
        Ok(Classification { score, truncated: decoded.truncated, parsed, grounding, generation: decoded.text, latency_ms: None })
    }

    /// Scores in input order; failures are kept per item.
    pub fn batch_score<S: AsRef<str>>(&self, comments: &[S]) -> Vec<Result<ScoreResult>> {
        comments.iter().map(|c| self.score(c.as_ref())).collect()
    }
}

pub fn score(model: &FrozenModel, soft: Option<&SoftPrompt>, prompt: &HardPrompt, comment: &str) -> Result<ScoreResult> {
    Scorer::new(model, soft, prompt, ScorerConfig::default())?.score(comment)
}

pub fn classify(model: &FrozenModel, soft: Option<&SoftPrompt>, prompt: &HardPrompt, comment: &str) -> Result<Classification> {
    Scorer::new(model, soft, prompt, ScorerConfig::default())?.classify(comment)
}

pub fn batch_score<S: AsRef<str>>(model: &FrozenModel, soft: Option<&SoftPrompt>, prompt: &HardPrompt, comments: &[S]) -> Result<Vec<Result<ScoreResult>>> {
    Ok(Scorer::new(model, soft, prompt, ScorerConfig::default())?.batch_score(comments))
}
