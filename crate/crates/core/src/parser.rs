//! Parsing generations back into blocks, and grounding checks.
//!
//! XML parsing takes the first occurrence of each block. The answer block is
//! anchored on the first `</Answer>`: its content starts after the nearest
//! preceding `<Answer>`, or at the start of the text when the generation is
//! a continuation of a prompt that already ended in `<Answer>`.
//!
//! Block bodies lose one leading and one trailing space. Outside the comment,
//! any whitespace run containing a line break becomes a single space first,
//! so hard-wrapped outputs parse to the same strings as unwrapped ones.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{Answer, Exemplar, Format, Guideline};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParsedAnswer {
    Yes,
    No,
    Unparseable,
}

impl ParsedAnswer {
    pub fn answer(self) -> Option<Answer> {
        match self {
            ParsedAnswer::Yes => Some(Answer::Yes),
            ParsedAnswer::No => Some(Answer::No),
            ParsedAnswer::Unparseable => None,
        }
    }
}

impl From<Answer> for ParsedAnswer {
    fn from(a: Answer) -> Self {
        match a {
            Answer::Yes => ParsedAnswer::Yes,
            Answer::No => ParsedAnswer::No,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub answer: ParsedAnswer,
    pub explanation: String,
    pub citations: Vec<String>,
    pub keywords: Vec<String>,
    /// The `<Comment>` block when the text contains one.
    pub comment: Option<String>,
    pub raw: String,
    /// A block was opened but never closed.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingReport {
    pub keyword_hits: Vec<bool>,
    /// Label of the matched guideline bullet per citation.
    pub citation_hits: Vec<Option<String>>,
    pub fully_grounded: bool,
}

const BLOCKS: [&str; 5] = ["Comment", "Answer", "Explanation", "Citations", "Keywords"];

/// Replace every whitespace run that contains a line break with one space.
pub fn collapse_newlines(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut run = String::new();
    let mut run_has_newline = false;
    for c in s.chars() {
        if c.is_whitespace() {
            run.push(c);
            run_has_newline |= c == '\n' || c == '\r';
        } else {
            flush(&mut out, &mut run, &mut run_has_newline);
            out.push(c);
        }
    }
    flush(&mut out, &mut run, &mut run_has_newline);
    out
}

fn flush(out: &mut String, run: &mut String, nl: &mut bool) {
    if *nl {
        out.push(' ');
    } else {
        out.push_str(run);
    }
    run.clear();
    *nl = false;
}

fn strip_one_space(s: &str) -> &str {
    let s = s.strip_prefix(' ').unwrap_or(s);
    s.strip_suffix(' ').unwrap_or(s)
}

fn body(s: &str) -> String {
    String::from(strip_one_space(&collapse_newlines(s)))
}

/// First `<name> … </name>` block: `(content, closed)`.
fn xml_block<'a>(text: &'a str, name: &str) -> Option<(&'a str, bool)> {
    let open = alloc::format!("<{name}>");
    let close = alloc::format!("</{name}>");
    let start = text.find(&open)? + open.len();
    match text[start..].find(&close) {
        Some(end) => Some((&text[start..start + end], true)),
        None => Some((&text[start..], false)),
    }
}

fn parse_answer(s: &str) -> ParsedAnswer {
    match s.trim() {
        "Yes" => ParsedAnswer::Yes,
        "No" => ParsedAnswer::No,
        _ => ParsedAnswer::Unparseable,
    }
}

fn split_keywords(s: &str) -> Vec<String> {
    if s.trim().is_empty() {
        return Vec::new();
    }
    s.split('|').map(|k| String::from(k.trim())).filter(|k| !k.is_empty()).collect()
}

/// Length of a bullet label like `(4)` or `(ab)` at the start of `s`.
fn label_len(s: &str) -> Option<usize> {
    let rest = s.strip_prefix('(')?;
    let close = rest.find(')')?;
    let inner = &rest[..close];
    (!inner.is_empty() && inner.len() <= 4 && inner.chars().all(|c| c.is_alphanumeric())).then_some(close + 2)
}

/// Split on commas that are followed (after optional spaces) by a bullet
/// label; commas inside bullet text stay put.
fn split_citations(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, _) in s.match_indices(',') {
        let after = s[i + 1..].trim_start_matches(' ');
        if label_len(after).is_some() {
            out.push(&s[start..i]);
            start = i + 1;
        }
    }
    out.push(&s[start..]);
    out.into_iter().map(|c| String::from(c.trim())).filter(|c| !c.is_empty()).collect()
}

/// Total: never fails, whatever the input.
pub fn parse(generation: &str, format: Format) -> ParsedResponse {
    match format {
        Format::Xml => parse_xml(generation),
        Format::Headings => parse_headings(generation),
    }
}

fn parse_xml(text: &str) -> ParsedResponse {
    let mut truncated = false;
    let mut get = |name: &str| match xml_block(text, name) {
        Some((c, closed)) => {
            truncated |= !closed;
            Some(c)
        }
        None => None,
    };
    let comment = get("Comment").map(|c| String::from(strip_one_space(c)));
    let explanation = get("Explanation").map(body).unwrap_or_default();
    let citations = get("Citations").map(|c| split_citations(&body(c))).unwrap_or_default();
    let keywords = get("Keywords").map(|c| split_keywords(&body(c))).unwrap_or_default();

    let answer = match text.find("</Answer>") {
        Some(end) => {
            let head = &text[..end];
            let start = head.rfind("<Answer>").map(|i| i + "<Answer>".len()).unwrap_or(0);
            parse_answer(&head[start..])
        }
        None => {
            if text.contains("<Answer>") {
                truncated = true;
            }
            ParsedAnswer::Unparseable
        }
    };
    ParsedResponse { answer, explanation, citations, keywords, comment, raw: String::from(text), truncated }
}

/// Heading format: each field runs to the end of its line or the next
/// recognised heading on that line.
fn parse_headings(text: &str) -> ParsedResponse {
    let mut fields: [Option<String>; 5] = Default::default();
    let mut first_line_answer = None;
    for (n, line) in text.split('\n').enumerate() {
        let found = BLOCKS.iter().enumerate().find_map(|(i, b)| {
            let rest = line.strip_prefix(b)?.strip_prefix(':')?;
            Some((i, rest))
        });
        match found {
            Some((i, rest)) => {
                if fields[i].is_none() {
                    fields[i] = Some(String::from(strip_one_space(cut_at_heading(rest))));
                }
            }
            None if n == 0 => first_line_answer = Some(String::from(cut_at_heading(line))),
            None => {}
        }
    }
    let [comment, answer, explanation, citations, keywords] = fields;
    let answer = answer.or(first_line_answer).map(|a| parse_answer(&a)).unwrap_or(ParsedAnswer::Unparseable);
    ParsedResponse {
        answer,
        explanation: explanation.unwrap_or_default(),
        citations: citations.map(|c| split_citations(&c)).unwrap_or_default(),
        keywords: keywords.map(|k| split_keywords(&k)).unwrap_or_default(),
        comment,
        raw: String::from(text),
        truncated: false,
    }
}

fn cut_at_heading(s: &str) -> &str {
    let mut end = s.len();
    for b in BLOCKS {
        let pat = alloc::format!(" {b}:");
        if let Some(i) = s.find(&pat) {
            end = end.min(i);
        }
    }
    &s[..end]
}

fn normalize(s: &str) -> String {
    let mut out = String::new();
    for w in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(w);
    }
    let trimmed = out.trim_end_matches(['.', ' ']);
    trimmed.to_lowercase()
}

/// Label of the guideline bullet a citation refers to: by leading label, by
/// `label text`, or by bullet text alone (case, spacing and a trailing period
/// ignored).
pub fn match_citation(citation: &str, guideline: &Guideline) -> Option<String> {
    let c = citation.trim();
    let n = normalize(c);
    for b in guideline.bullets() {
        let labelled = c.strip_prefix(b.label.as_str()).is_some_and(|r| r.is_empty() || r.starts_with(char::is_whitespace));
        if labelled || n == normalize(&b.citation()) || n == normalize(&b.text) {
            return Some(b.label.clone());
        }
    }
    None
}

pub(crate) fn check_grounding(keywords: &[String], citations: &[String], comment: &str, guideline: &Guideline) -> GroundingReport {
    let flat = collapse_newlines(comment);
    let keyword_hits: Vec<bool> = keywords.iter().map(|k| !k.is_empty() && flat.contains(collapse_newlines(k).as_str())).collect();
    let citation_hits: Vec<Option<String>> = citations.iter().map(|c| match_citation(c, guideline)).collect();
    let fully_grounded = keyword_hits.iter().all(|&h| h) && citation_hits.iter().all(Option::is_some);
    GroundingReport { keyword_hits, citation_hits, fully_grounded }
}

/// Keywords must be excerpts of `comment` (line breaks compared as spaces)
/// and citations must name guideline bullets. An unparseable answer is never
/// considered grounded.
pub fn validate_grounding(parsed: &ParsedResponse, comment: &str, guideline: &Guideline) -> GroundingReport {
    let mut r = check_grounding(&parsed.keywords, &parsed.citations, comment, guideline);
    if parsed.answer == ParsedAnswer::Unparseable {
        r.fully_grounded = false;
    }
    r
}

/// Turn a grounded parse (with a comment block) into an exemplar. Citations
/// are rewritten to the canonical `label text` form of the bullet they match.
pub fn canonicalize(parsed: &ParsedResponse, guideline: &Guideline) -> Result<Exemplar> {
    let answer = parsed.answer.answer().ok_or_else(|| Error::Grounding(String::from("answer is unparseable")))?;
    let comment = parsed.comment.clone().ok_or_else(|| Error::Grounding(String::from("response has no comment block")))?;
    let report = validate_grounding(parsed, &comment, guideline);
    if let Some(i) = report.keyword_hits.iter().position(|h| !h) {
        return Err(Error::Grounding(alloc::format!("keyword {:?} is not an excerpt of the comment", parsed.keywords[i])));
    }
    let mut citations = Vec::new();
    for (c, hit) in parsed.citations.iter().zip(&report.citation_hits) {
        let label = hit.as_ref().ok_or_else(|| Error::Grounding(alloc::format!("citation {c:?} matches no guideline bullet")))?;
        let b = guideline.bullets().find(|b| &b.label == label).expect("matched label exists");
        citations.push(b.citation());
    }
    Ok(Exemplar { comment, answer, explanation: parsed.explanation.clone(), citations, keywords: parsed.keywords.clone() })
}
