//! Hard prompts: a guideline, few-shot exemplars and the tagged block layout.
//!
//! Layout (spaced XML):
//!
//! ```text
//! {policy_name}:
//! {preamble}
//! (1) violation bullet.
//! {exception_preamble}
//! (a) exception bullet.
//! Question: {question}
//! <Comment> ... </Comment>
//! <Answer> Yes </Answer>
//! <Explanation> ... </Explanation>
//! <Citations> (1) ...,(4) ... </Citations>
//! <Keywords> kw | kw </Keywords>
//! ---
//! <Comment> {query} </Comment>
//! <Answer>
//! ```

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parser::check_grounding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    pub fn as_str(self) -> &'static str {
        match self {
            Answer::Yes => "Yes",
            Answer::No => "No",
        }
    }

    pub fn from_bool(yes: bool) -> Self {
        if yes {
            Answer::Yes
        } else {
            Answer::No
        }
    }

    pub fn is_yes(self) -> bool {
        self == Answer::Yes
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bullet {
    /// e.g. `(1)` or `(a)`
    pub label: String,
    /// Bullet text without the trailing period.
    pub text: String,
}

impl Bullet {
    pub fn new(label: &str, text: &str) -> Self {
        Bullet { label: label.into(), text: text.into() }
    }

    /// The form used inside `<Citations>`: label, space, text.
    pub fn citation(&self) -> String {
        format!("{} {}", self.label, self.text)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Guideline {
    pub policy_name: String,
    pub preamble: String,
    pub violation_bullets: Vec<Bullet>,
    /// Line introducing the exceptions. Defaults to a sentence built from
    /// the policy name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exception_preamble: Option<String>,
    #[serde(default)]
    pub exception_bullets: Vec<Bullet>,
    pub question: String,
}

impl Guideline {
    pub fn validate(&self) -> Result<()> {
        if self.violation_bullets.is_empty() {
            return Err(Error::invalid("guideline needs at least one violation bullet"));
        }
        let mut labels: Vec<&str> = self.bullets().map(|b| b.label.as_str()).collect();
        labels.sort_unstable();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("duplicate bullet label {}", w[0])));
        }
        if self.bullets().any(|b| b.label.is_empty()) {
            return Err(Error::invalid("empty bullet label"));
        }
        Ok(())
    }

    pub fn bullets(&self) -> impl Iterator<Item = &Bullet> {
        self.violation_bullets.iter().chain(self.exception_bullets.iter())
    }

    pub fn exception_line(&self) -> String {
        match &self.exception_preamble {
            Some(p) => p.clone(),
            None => format!("However there are exceptions. A comment does not violate the {} if it is:", self.policy_name),
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&self.policy_name);
        s.push_str(":\n");
        s.push_str(&self.preamble);
        s.push('\n');
        for b in &self.violation_bullets {
            push_bullet(&mut s, b);
        }
        if !self.exception_bullets.is_empty() {
            s.push_str(&self.exception_line());
            s.push('\n');
            for b in &self.exception_bullets {
                push_bullet(&mut s, b);
            }
        }
        s.push_str("Question: ");
        s.push_str(&self.question);
        s
    }
}

fn push_bullet(s: &mut String, b: &Bullet) {
    s.push_str(&b.label);
    s.push(' ');
    s.push_str(&b.text);
    s.push_str(".\n");
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub comment: String,
    pub answer: Answer,
    #[serde(default)]
    pub explanation: String,
    /// Cited guideline bullets, normally in `label text` form.
    #[serde(default)]
    pub citations: Vec<String>,
    /// Verbatim excerpts of the comment.
    #[serde(default)]
    pub keywords: Vec<String>,
}

impl Exemplar {
    /// Grounding and layout checks: keywords are excerpts of the comment,
    /// citations name guideline bullets, and single-line blocks stay on one
    /// line so they survive a render/parse round trip.
    pub fn validate(&self, guideline: &Guideline) -> Result<()> {
        if self.comment.is_empty() {
            return Err(Error::Empty("exemplar comment"));
        }
        if self.explanation.contains('\n') {
            return Err(Error::invalid("explanation must be a single line"));
        }
        for k in &self.keywords {
            if k.trim().is_empty() || k.contains('\n') || k.contains('|') || k.trim() != k {
                return Err(Error::Grounding(format!("malformed keyword {k:?}")));
            }
        }
        for c in &self.citations {
            if c.contains('\n') || c.trim() != c {
                return Err(Error::Grounding(format!("malformed citation {c:?}")));
            }
        }
        let report = check_grounding(&self.keywords, &self.citations, &self.comment, guideline);
        if let Some(i) = report.keyword_hits.iter().position(|h| !h) {
            return Err(Error::Grounding(format!("keyword {:?} is not an excerpt of the comment", self.keywords[i])));
        }
        if let Some(i) = report.citation_hits.iter().position(|h| h.is_none()) {
            return Err(Error::Grounding(format!("citation {:?} matches no guideline bullet", self.citations[i])));
        }
        Ok(())
    }
}

/// Prompt ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoGuideline,
    AnswerOnly,
    NoXml,
    ZeroShot,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoGuideline, Variant::AnswerOnly, Variant::NoXml, Variant::ZeroShot];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoGuideline => "no_guideline",
            Variant::AnswerOnly => "answer_only",
            Variant::NoXml => "no_xml",
            Variant::ZeroShot => "zero_shot",
        }
    }

    pub fn format(self) -> Format {
        if self == Variant::NoXml {
            Format::Headings
        } else {
            Format::Xml
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s || v.name().replace('_', "-") == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Block markup: XML-style tags or `Name:` headings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Xml,
    Headings,
}

/// Whitespace inside XML tags.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    #[default]
    Spaced,
    Unspaced,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardPrompt {
    pub guideline: Guideline,
    #[serde(default)]
    pub exemplars: Vec<Exemplar>,
    #[serde(default = "full")]
    pub variant: Variant,
    #[serde(default)]
    pub spacing: Spacing,
}

fn full() -> Variant {
    Variant::Full
}

pub const SEPARATOR: &str = "---";

/// Which blocks a variant keeps in each exemplar.
fn keeps(v: Variant) -> (bool, bool, bool) {
    // (explanation, citations, keywords)
    match v {
        Variant::Full | Variant::NoXml => (true, true, true),
        Variant::NoGuideline => (false, false, true),
        Variant::AnswerOnly | Variant::ZeroShot => (false, false, false),
    }
}

fn tag(s: &mut String, name: &str, body: &str, spacing: Spacing) {
    let pad = if spacing == Spacing::Spaced { " " } else { "" };
    s.push('<');
    s.push_str(name);
    s.push('>');
    s.push_str(pad);
    s.push_str(body);
    s.push_str(pad);
    s.push_str("</");
    s.push_str(name);
    s.push('>');
}

fn heading(s: &mut String, name: &str, body: &str) {
    s.push_str(name);
    s.push_str(": ");
    s.push_str(body);
}

/// Render one exemplar as the blocks `variant` keeps, without a trailing newline.
pub fn render_block(e: &Exemplar, variant: Variant, spacing: Spacing) -> String {
    let (expl, cit, kw) = keeps(variant);
    let citations = e.citations.join(",");
    let keywords = e.keywords.join(" | ");
    let mut blocks: Vec<(&str, &str)> = alloc::vec![("Comment", e.comment.as_str()), ("Answer", e.answer.as_str())];
    if expl {
        blocks.push(("Explanation", &e.explanation));
    }
    if cit {
        blocks.push(("Citations", &citations));
    }
    if kw {
        blocks.push(("Keywords", &keywords));
    }
    let mut s = String::new();
    for (i, (name, body)) in blocks.into_iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        match variant.format() {
            Format::Xml => tag(&mut s, name, body, spacing),
            Format::Headings => heading(&mut s, name, body),
        }
    }
    s
}

/// The query block: the comment followed by an open answer block.
pub fn render_query(comment: &str, variant: Variant, spacing: Spacing) -> String {
    let mut s = String::new();
    match variant.format() {
        Format::Xml => {
            tag(&mut s, "Comment", comment, spacing);
            s.push_str("\n<Answer>");
        }
        Format::Headings => {
            heading(&mut s, "Comment", comment);
            s.push_str("\nAnswer:");
        }
    }
    s
}

impl HardPrompt {
    pub fn new(guideline: Guideline, exemplars: Vec<Exemplar>) -> Result<Self> {
        let p = HardPrompt { guideline, exemplars, variant: Variant::Full, spacing: Spacing::Spaced };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.guideline.validate()?;
        for e in &self.exemplars {
            e.validate(&self.guideline)?;
        }
        Ok(())
    }

    pub fn with_spacing(&self, spacing: Spacing) -> Self {
        HardPrompt { spacing, ..self.clone() }
    }

    pub fn format(&self) -> Format {
        self.variant.format()
    }

    /// Everything before the query block, including its trailing newline.
    /// Shared by every comment scored against this prompt.
    pub fn render_prefix(&self) -> Result<String> {
        self.validate()?;
        let mut s = String::new();
        if self.variant != Variant::NoGuideline {
            s.push_str(&self.guideline.render());
            s.push('\n');
        }
        if self.variant != Variant::ZeroShot {
            for e in &self.exemplars {
                s.push_str(&render_block(e, self.variant, self.spacing));
                s.push('\n');
                s.push_str(SEPARATOR);
                s.push('\n');
            }
        }
        Ok(s)
    }

    pub fn render(&self, comment: &str) -> Result<String> {
        if comment.is_empty() {
            return Err(Error::Empty("comment"));
        }
        let mut s = self.render_prefix()?;
        s.push_str(&render_query(comment, self.variant, self.spacing));
        Ok(s)
    }

    /// Insert an exemplar at `position` (clamped to the end).
    pub fn add_exemplar(&self, exemplar: Exemplar, position: usize) -> Result<Self> {
        exemplar.validate(&self.guideline)?;
        let mut p = self.clone();
        let at = position.min(p.exemplars.len());
        p.exemplars.insert(at, exemplar);
        Ok(p)
    }

    /// Derive an ablation from a full prompt. Dropped blocks are removed
    /// from the exemplars, not just hidden at render time.
    pub fn make_variant(&self, variant: Variant) -> Result<Self> {
        if self.variant != Variant::Full {
            return Err(Error::invalid(format!("variants derive from a full prompt, not {}", self.variant)));
        }
        let mut p = self.clone();
        p.variant = variant;
        let (expl, cit, kw) = keeps(variant);
        if variant == Variant::ZeroShot {
            p.exemplars.clear();
        }
        for e in &mut p.exemplars {
            if !expl {
                e.explanation.clear();
            }
            if !cit {
                e.citations.clear();
            }
            if !kw {
                e.keywords.clear();
            }
        }
        Ok(p)
    }

    /// Strings that end a generated response for this prompt.
    pub fn stop_strings(&self) -> Vec<String> {
        let last = match (self.variant.format(), self.variant) {
            (Format::Headings, _) => return alloc::vec![String::from(SEPARATOR), String::from("\nComment:")],
            (_, Variant::AnswerOnly) => "</Answer>",
            (_, Variant::NoGuideline | Variant::Full | Variant::ZeroShot) => "</Keywords>",
            (_, Variant::NoXml) => unreachable!(),
        };
        alloc::vec![String::from(SEPARATOR), String::from(last)]
    }
}
