//! A synthetic comment world built from a small lexicon of offensive
//! phrases and benign sentence templates.
//!
//! Ground truth is lexical: a comment is toxic iff it contains at least one
//! lexicon phrase. The same world supplies the pretraining documents for
//! the fixture backbone. Those documents pair several policies with their
//! own decision rules. Under the stricter "Toxic Policy" a single phrase is
//! only sometimes a violation, so a backbone reading that policy tends to
//! answer No on single-phrase comments until a soft prompt shifts it.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::prompt::{render_block, Answer, Bullet, Exemplar, Guideline, HardPrompt, Spacing, Variant, SEPARATOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Obscene,
    Threat,
    Insult,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Obscene, Category::Threat, Category::Insult];

    pub fn phrases(self) -> &'static [&'static str] {
        match self {
            Category::Obscene => &["freaking crap", "stinking dung", "damn garbage", "bloody filth", "piece of crap", "crappy junk"],
            Category::Threat => &["i will hurt you", "watch your back", "i will find you", "you better run", "i will break your neck", "you will pay for this"],
            Category::Insult => &["you idiot", "stupid fool", "pathetic loser", "brainless clown", "you moron", "worthless troll"],
        }
    }

    pub fn bullet_text(self) -> &'static str {
        match self {
            Category::Obscene => "the author makes obscene references",
            Category::Threat => "the author threatens violence",
            Category::Insult => "the author insults their conversation partner",
        }
    }
}

const TOPICS: [&str; 16] = [
    "river", "castle", "guitar", "volcano", "library", "railway", "harbor", "comet", "garden", "bridge", "museum", "glacier", "orchard", "lighthouse", "canyon", "festival",
];

const BENIGN: [&str; 12] = [
    "thanks for fixing the {} page",
    "i added a source about the {}",
    "please check the citation for the {}",
    "the {} section needs more detail",
    "can you explain why you removed the {} photo",
    "i moved the {} paragraph to the history section",
    "the date for the {} looks wrong to me",
    "nice work on the {} article",
    "we should merge the two {} pages",
    "is there a map of the {} we can use",
    "the {} infobox is missing a reference",
    "i reverted the change to the {} because it had no source",
];

const DISAGREE: [&str; 6] = [
    "i disagree with your edit to the {}",
    "your change to the {} is not an improvement",
    "i do not think the {} claim is supported",
    "that edit to the {} was a mistake in my view",
    "the old wording for the {} was clearer",
    "please discuss the {} change before reverting again",
];

const CLOSERS: [&str; 6] = ["", "", "thanks.", "see the talk page.", "regards.", "cheers."];

/// A generated comment with the lexicon phrases it contains.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthComment {
    pub text: String,
    /// In order of appearance.
    pub phrases: Vec<(Category, &'static str)>,
    pub disagreement: bool,
}

impl SynthComment {
    pub fn count_in(&self, categories: &[Category]) -> usize {
        self.phrases.iter().filter(|(c, _)| categories.contains(c)).count()
    }
}

fn sentence<R: Rng + ?Sized>(rng: &mut R, templates: &[&str]) -> String {
    let t = templates.choose(rng).expect("non-empty");
    t.replace("{}", TOPICS.choose(rng).expect("non-empty"))
}

/// Every lexicon phrase found in `text`.
pub fn find_phrases(text: &str) -> Vec<(Category, &'static str)> {
    let mut found: Vec<(usize, Category, &'static str)> = Vec::new();
    for c in Category::ALL {
        for p in c.phrases() {
            let mut from = 0;
            while let Some(i) = text[from..].find(p) {
                found.push((from + i, c, p));
                from += i + p.len();
            }
        }
    }
    found.sort_by_key(|f| f.0);
    found.into_iter().map(|(_, c, p)| (c, p)).collect()
}

/// A comment with exactly the requested phrases, spliced between benign
/// sentences in random order.
pub fn make_comment<R: Rng + ?Sized>(rng: &mut R, phrases: &[(Category, &'static str)], disagreement: bool) -> SynthComment {
    loop {
        let mut parts: Vec<String> = Vec::new();
        let n_benign = rng.random_range(1..=2);
        for i in 0..n_benign {
            let templates: &[&str] = if disagreement && i == 0 { &DISAGREE } else { &BENIGN };
            parts.push(format!("{}.", sentence(rng, templates)));
        }
        for (_, p) in phrases {
            let frag = match rng.random_range(0..4) {
                0 => format!("{p}!"),
                1 => format!("{p}."),
                2 => format!("honestly, {p}."),
                _ => format!("{p}, seriously."),
            };
            parts.push(frag);
        }
        parts.shuffle(rng);
        let closer = CLOSERS.choose(rng).expect("non-empty");
        if !closer.is_empty() {
            parts.push(closer.to_string());
        }
        let text = parts.join(" ");
        let found = find_phrases(&text);
        // Splicing can in principle form a phrase across fragments; retry.
        let mut want: Vec<&str> = phrases.iter().map(|p| p.1).collect();
        let mut got: Vec<&str> = found.iter().map(|p| p.1).collect();
        want.sort_unstable();
        got.sort_unstable();
        if want == got {
            return SynthComment { text, phrases: found, disagreement };
        }
    }
}

/// `n` random distinct-where-possible phrases drawn from `categories`.
pub fn random_phrases<R: Rng + ?Sized>(rng: &mut R, n: usize, categories: &[Category]) -> Vec<(Category, &'static str)> {
    let mut out: Vec<(Category, &'static str)> = Vec::new();
    while out.len() < n {
        let c = *categories.choose(rng).expect("non-empty");
        let p = *c.phrases().choose(rng).expect("non-empty");
        if !out.iter().any(|x| x.1 == p) {
            out.push((c, p));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub toxic_frac: f64,
    /// Distribution over the number of phrases in a toxic comment (index 0
    /// is one phrase).
    pub phrase_count_weights: Vec<f64>,
    pub disagreement_frac: f64,
    pub raters: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { toxic_frac: 0.5, phrase_count_weights: vec![0.8, 0.15, 0.05], disagreement_frac: 0.3, raters: 10 }
    }
}

fn pick_weighted<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

/// Probability that a single rater flags the comment.
fn rater_p(c: &SynthComment) -> f64 {
    match c.phrases.len() {
        0 if c.disagreement => 0.2,
        0 => 0.05,
        k => (0.5 + 0.15 * k as f64).min(0.95),
    }
}

/// Error when a toxic phrase occurs inside benign material.
pub fn check_lexicons(toxic: &[&str], benign: &[&str]) -> Result<()> {
    for b in benign {
        if let Some(t) = toxic.iter().find(|t| b.contains(*t)) {
            return Err(Error::invalid(format!("benign template {b:?} contains toxic phrase {t:?}")));
        }
    }
    Ok(())
}

fn all_toxic() -> Vec<&'static str> {
    Category::ALL.iter().flat_map(|c| c.phrases().iter().copied()).collect()
}

fn all_benign() -> Vec<&'static str> {
    BENIGN.iter().chain(&DISAGREE).chain(&CLOSERS).chain(&TOPICS).copied().collect()
}

/// Labeled comments with lexical ground truth and simulated per-rater marks.
pub fn synth_dataset(n: usize, seed: u64, config: &SynthConfig) -> Result<Vec<LabeledExample>> {
    if config.phrase_count_weights.is_empty() || config.raters == 0 {
        return Err(Error::invalid("synthetic config needs phrase-count weights and raters"));
    }
    check_lexicons(&all_toxic(), &all_benign())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let toxic = rng.random_bool(config.toxic_frac.clamp(0.0, 1.0));
        let k = if toxic { 1 + pick_weighted(&mut rng, &config.phrase_count_weights) } else { 0 };
        let phrases = random_phrases(&mut rng, k, &Category::ALL);
        let disagreement = rng.random_bool(config.disagreement_frac.clamp(0.0, 1.0));
        let c = make_comment(&mut rng, &phrases, disagreement);
        let p = rater_p(&c);
        let ratings = (0..config.raters).map(|_| rng.random_bool(p) as u8).collect();
        out.push(LabeledExample { comment: c.text, toxic, ratings });
    }
    Ok(out)
}

/// How a policy turns phrase counts into an answer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Rule {
    /// Yes iff at least one covered phrase.
    Any,
    /// Two or more covered phrases: Yes. Exactly one: Yes with probability
    /// `single`. None: No.
    Severe { single: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub guideline: Guideline,
    pub categories: Vec<Category>,
    pub rule: Rule,
}

fn bullets(categories: &[Category]) -> Vec<Bullet> {
    categories.iter().enumerate().map(|(i, c)| Bullet::new(&format!("({})", i + 1), c.bullet_text())).collect()
}

fn exception() -> Vec<Bullet> {
    vec![Bullet::new("(a)", "disagreeing politely with an edit")]
}

fn guideline(name: &str, preamble: &str, categories: &[Category]) -> Guideline {
    Guideline {
        policy_name: name.into(),
        preamble: format!("{preamble} A comment violates the {name} if: "),
        violation_bullets: bullets(categories),
        exception_preamble: None,
        exception_bullets: exception(),
        question: format!("Does the comment violate the {name}?"),
    }
}

/// The policy the experiments use.
pub fn toxic_policy() -> Policy {
    Policy {
        guideline: guideline("Toxic Policy", "A toxic comment drives people away from a discussion.", &Category::ALL),
        categories: Category::ALL.to_vec(),
        rule: Rule::Severe { single: 0.05 },
    }
}

pub fn world_policies() -> Vec<Policy> {
    vec![
        toxic_policy(),
        Policy {
            guideline: guideline("Harm Policy", "A harmful comment contains any abuse at all.", &Category::ALL),
            categories: Category::ALL.to_vec(),
            rule: Rule::Any,
        },
        Policy {
            guideline: guideline("Threat Policy", "A threatening comment makes people fear for their safety.", &[Category::Threat]),
            categories: vec![Category::Threat],
            rule: Rule::Any,
        },
        Policy {
            guideline: guideline("Obscenity Policy", "An obscene comment uses foul language.", &[Category::Obscene]),
            categories: vec![Category::Obscene],
            rule: Rule::Any,
        },
    ]
}

impl Policy {
    pub fn decide<R: Rng + ?Sized>(&self, c: &SynthComment, rng: &mut R) -> Answer {
        let k = c.count_in(&self.categories);
        Answer::from_bool(match self.rule {
            Rule::Any => k >= 1,
            Rule::Severe { single } => k >= 2 || (k == 1 && rng.random_bool(single)),
        })
    }

    /// The reference answer block for a comment and answer.
    pub fn explain(&self, c: &SynthComment, answer: Answer) -> Exemplar {
        let name = &self.guideline.policy_name;
        if answer == Answer::No {
            return Exemplar {
                comment: c.text.clone(),
                answer,
                explanation: format!("The comment does not violate the {name}."),
                citations: Vec::new(),
                keywords: Vec::new(),
            };
        }
        let mut sentences = Vec::new();
        let mut citations = Vec::new();
        let mut keywords = Vec::new();
        let mut order: Vec<Category> = Vec::new();
        for (cat, _) in &c.phrases {
            if self.categories.contains(cat) && !order.contains(cat) {
                order.push(*cat);
            }
        }
        for cat in order {
            let i = self.categories.iter().position(|x| *x == cat).expect("covered");
            let cite = self.guideline.violation_bullets[i].citation();
            let kws: Vec<&str> = c.phrases.iter().filter(|(x, _)| *x == cat).map(|p| p.1).collect();
            let quoted: Vec<String> = kws.iter().map(|k| format!("'{k}'")).collect();
            let lead = if sentences.is_empty() { "The comment mentions" } else { "It also mentions" };
            sentences.push(format!("{lead} {} so it violates '{cite}'.", quoted.join(", ")));
            citations.push(cite);
            keywords.extend(kws.iter().map(|k| k.to_string()));
        }
        Exemplar { comment: c.text.clone(), answer, explanation: sentences.join(" "), citations, keywords }
    }
}

/// Random comment for the pretraining world: covered, uncovered or no
/// phrases in varying numbers.
fn world_comment<R: Rng + ?Sized>(rng: &mut R) -> SynthComment {
    let k = pick_weighted(rng, &[0.4, 0.35, 0.17, 0.08]);
    let phrases = random_phrases(rng, k, &Category::ALL);
    let disagreement = rng.random_bool(0.3);
    make_comment(rng, &phrases, disagreement)
}

/// One pretraining document: a rendered prompt followed by a completed
/// answer block and a separator. Formats, spacing, exemplar counts and
/// policies vary across documents.
pub fn world_document<R: Rng + ?Sized>(rng: &mut R, policies: &[Policy]) -> String {
    let policy = &policies[pick_weighted(rng, &[0.4, 0.3, 0.15, 0.15][..policies.len().min(4)])];
    let variant = [Variant::Full, Variant::NoXml, Variant::AnswerOnly, Variant::NoGuideline, Variant::ZeroShot][pick_weighted(rng, &[0.55, 0.1, 0.1, 0.1, 0.15])];
    let spacing = if variant != Variant::NoXml && rng.random_bool(0.3) { Spacing::Unspaced } else { Spacing::Spaced };
    let n_ex = if variant == Variant::ZeroShot { 0 } else { rng.random_range(0..=2) };
    let mut exemplars = Vec::with_capacity(n_ex);
    for _ in 0..n_ex {
        let c = world_comment(rng);
        let a = policy.decide(&c, rng);
        exemplars.push(policy.explain(&c, a));
    }
    let full = HardPrompt { guideline: policy.guideline.clone(), exemplars, variant: Variant::Full, spacing };
    let prompt = full.make_variant(variant).expect("full prompt");
    let c = world_comment(rng);
    let a = policy.decide(&c, rng);
    let last = policy.explain(&c, a);
    let mut doc = prompt.render_prefix().expect("valid prompt");
    doc.push_str(&render_block(&last, variant, spacing));
    doc.push('\n');
    doc.push_str(SEPARATOR);
    doc
}

pub fn world_corpus(n: usize, seed: u64) -> Vec<String> {
    let policies = world_policies();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| world_document(&mut rng, &policies)).collect()
}

/// The hard prompt the experiments score with: the toxic policy and two
/// exemplars from the synthetic world.
pub fn desk_prompt() -> HardPrompt {
    let policy = toxic_policy();
    let yes = SynthComment {
        text: "you moron, the castle page is wrong. stinking dung!".into(),
        phrases: vec![(Category::Insult, "you moron"), (Category::Obscene, "stinking dung")],
        disagreement: false,
    };
    let no = SynthComment { text: "i disagree with your edit to the comet. thanks.".into(), phrases: Vec::new(), disagreement: true };
    HardPrompt::new(policy.guideline.clone(), vec![policy.explain(&yes, Answer::Yes), policy.explain(&no, Answer::No)]).expect("valid desk prompt")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::{parse, validate_grounding};
    use crate::prompt::Format;

    #[test]
    fn labels_follow_the_lexicon() {
        let ds = synth_dataset(300, 4, &SynthConfig::default()).unwrap();
        for e in &ds {
            assert_eq!(e.toxic, !find_phrases(&e.comment).is_empty(), "{}", e.comment);
            assert_eq!(e.ratings.len(), 10);
        }
        assert_eq!(ds, synth_dataset(300, 4, &SynthConfig::default()).unwrap());
        assert!(synth_dataset(0, 4, &SynthConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn overlapping_lexicons_are_rejected() {
        assert!(check_lexicons(&all_toxic(), &all_benign()).is_ok());
        assert!(check_lexicons(&["you idiot"], &["thanks, you idiot"]).is_err());
    }

    #[test]
    fn world_documents_are_grounded_and_parse() {
        let policies = world_policies();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let c = world_comment(&mut rng);
            for p in &policies {
                let a = p.decide(&c, &mut rng);
                let e = p.explain(&c, a);
                e.validate(&p.guideline).unwrap();
                let text = render_block(&e, Variant::Full, Spacing::Spaced);
                let body = text.split_once("<Answer>").unwrap().1;
                let parsed = parse(&format!("<Answer>{body}"), Format::Xml);
                assert_eq!(parsed.answer.answer(), Some(a));
                assert!(validate_grounding(&parsed, &c.text, &p.guideline).fully_grounded);
            }
        }
        let docs = world_corpus(50, 3);
        assert!(docs.iter().all(|d| d.ends_with(SEPARATOR)));
        assert_eq!(docs, world_corpus(50, 3));
    }

    #[test]
    fn desk_prompt_is_valid() {
        let p = desk_prompt();
        assert_eq!(p.exemplars.len(), 2);
        assert!(p.render("a comment").unwrap().ends_with("<Answer>"));
    }
}
