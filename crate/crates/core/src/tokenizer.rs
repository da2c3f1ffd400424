//! Byte-fallback word-piece tokenizer with atomic special tokens.
//!
//! Id layout: `0..256` are raw bytes, then the special tokens in the order
//! given at build time, then learned multi-character pieces. Learned pieces
//! are chosen by frequency-driven pair merging over pre-tokenized words and
//! applied at encode time by greedy longest match, falling back to bytes.
//!
//! Specials are matched before anything else and never split. A special that
//! starts (ends) with an alphanumeric character only matches when the
//! preceding (following) character is not alphanumeric, so `" Yes"` is one
//! token in `"<Answer> Yes </Answer>"` but `"Yesterday"` is not touched.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// XML tag pieces used by the prompt grammar.
pub const TAG_SPECIALS: [&str; 10] = [
    "<Comment>",
    "</Comment>",
    "<Answer>",
    "</Answer>",
    "<Explanation>",
    "</Explanation>",
    "<Citations>",
    "</Citations>",
    "<Keywords>",
    "</Keywords>",
];

/// Answer tokens. The spaced and unspaced forms are distinct tokens.
pub const ANSWER_SPECIALS: [&str; 4] = [" Yes", " No", "Yes", "No"];

pub const BYTE_TOKENS: usize = 256;

/// All specials the prompt grammar requires, in canonical order.
pub fn default_specials() -> Vec<String> {
    TAG_SPECIALS
        .iter()
        .chain(ANSWER_SPECIALS.iter())
        .map(|s| s.to_string())
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TokenizerSpec {
    specials: Vec<String>,
    pieces: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "TokenizerSpec", into = "TokenizerSpec")]
pub struct Tokenizer {
    specials: Vec<String>,
    pieces: Vec<String>,
    piece_ids: BTreeMap<String, TokenId>,
    max_piece_chars: usize,
    specials_by_len: Vec<(String, TokenId)>,
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.specials == other.specials && self.pieces == other.pieces
    }
}

impl From<Tokenizer> for TokenizerSpec {
    fn from(t: Tokenizer) -> Self {
        TokenizerSpec { specials: t.specials, pieces: t.pieces }
    }
}

impl TryFrom<TokenizerSpec> for Tokenizer {
    type Error = Error;
    fn try_from(spec: TokenizerSpec) -> Result<Self> {
        Tokenizer::from_parts(spec.specials, spec.pieces)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Word,
    Space,
    OtherSpace,
    Punct,
}

fn class(c: char) -> Class {
    if c == ' ' {
        Class::Space
    } else if c.is_whitespace() {
        Class::OtherSpace
    } else if c.is_alphanumeric() {
        Class::Word
    } else {
        Class::Punct
    }
}

/// Characters a training corpus may contain.
fn supported(c: char) -> bool {
    !c.is_control() || c == '\n' || c == '\t'
}

/// Split plain text (no specials) into pre-tokens: an optional leading space
/// glued to a word or punctuation run, or a whitespace run.
fn pre_tokenize(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let end_of = |j: usize| if j < chars.len() { chars[j].0 } else { text.len() };
    while i < chars.len() {
        let start = i;
        let c = chars[i].1;
        let k = class(c);
        let next = chars.get(i + 1).map(|&(_, c)| class(c));
        match (k, next) {
            (Class::Space, Some(n @ (Class::Word | Class::Punct))) => {
                i += 1;
                while i < chars.len() && class(chars[i].1) == n {
                    i += 1;
                }
            }
            (Class::Word | Class::Punct, _) => {
                while i < chars.len() && class(chars[i].1) == k {
                    i += 1;
                }
            }
            _ => {
                while i < chars.len() && matches!(class(chars[i].1), Class::Space | Class::OtherSpace) {
                    i += 1;
                }
                // Leave a trailing single space to attach to the next word.
                if i < chars.len() && i - start > 1 && chars[i - 1].1 == ' ' {
                    i -= 1;
                }
            }
        }
        out.push(&text[chars[start].0..end_of(i)]);
    }
    out
}

impl Tokenizer {
    /// Build a tokenizer from a corpus. `vocab_size` bounds the total id
    /// count (bytes + specials + learned pieces).
    pub fn train(corpus: &str, specials: &[String], vocab_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty("tokenizer corpus"));
        }
        let mut bad: Vec<u8> = Vec::new();
        for c in corpus.chars().filter(|&c| !supported(c)) {
            let mut buf = [0u8; 4];
            for &b in c.encode_utf8(&mut buf).as_bytes() {
                if !bad.contains(&b) {
                    bad.push(b);
                }
            }
        }
        if !bad.is_empty() {
            bad.sort_unstable();
            return Err(Error::UnsupportedChars { bytes: bad });
        }
        for required in default_specials() {
            if !specials.contains(&required) {
                return Err(Error::invalid(alloc::format!("missing required special {required:?}")));
            }
        }
        let budget = vocab_size.saturating_sub(BYTE_TOKENS + specials.len());

        // Word frequencies over the non-special segments.
        let skeleton = Tokenizer::from_parts(specials.to_vec(), Vec::new())?;
        let mut words: BTreeMap<&str, u64> = BTreeMap::new();
        for seg in skeleton.segments(corpus) {
            if let Segment::Text(t) = seg {
                for w in pre_tokenize(t) {
                    *words.entry(w).or_insert(0) += 1;
                }
            }
        }

        let mut symbols: Vec<String> = Vec::new();
        let mut symbol_ids: BTreeMap<String, u32> = BTreeMap::new();
        let mut chars: Vec<char> = words.keys().flat_map(|w| w.chars()).collect();
        chars.sort_unstable();
        chars.dedup();
        for c in chars {
            symbol_ids.insert(c.to_string(), symbols.len() as u32);
            symbols.push(c.to_string());
        }
        let mut seqs: Vec<(Vec<u32>, u64)> = words
            .iter()
            .map(|(w, &n)| (w.chars().map(|c| symbol_ids[&c.to_string()]).collect(), n))
            .collect();

        let mut pieces: Vec<String> = Vec::new();
        while pieces.len() < budget {
            let mut pairs: BTreeMap<(u32, u32), u64> = BTreeMap::new();
            for (seq, n) in &seqs {
                for w in seq.windows(2) {
                    *pairs.entry((w[0], w[1])).or_insert(0) += n;
                }
            }
            // Highest count wins; ties go to the lexicographically smallest
            // merged string, then the smallest pair.
            let mut best: Option<((u32, u32), u64, String)> = None;
            for (&(a, b), &n) in &pairs {
                if n < 2 {
                    continue;
                }
                let merged = alloc::format!("{}{}", symbols[a as usize], symbols[b as usize]);
                if specials.contains(&merged) {
                    continue;
                }
                let better = match &best {
                    None => true,
                    Some((_, bn, bs)) => n > *bn || (n == *bn && merged < *bs),
                };
                if better {
                    best = Some(((a, b), n, merged));
                }
            }
            let Some(((a, b), _, merged)) = best else { break };
            let new_id = match symbol_ids.get(&merged) {
                Some(&id) => id,
                None => {
                    let id = symbols.len() as u32;
                    symbols.push(merged.clone());
                    symbol_ids.insert(merged.clone(), id);
                    id
                }
            };
            if !pieces.contains(&merged) {
                pieces.push(merged);
            }
            for (seq, _) in seqs.iter_mut() {
                let mut i = 0;
                let mut out = Vec::with_capacity(seq.len());
                while i < seq.len() {
                    if i + 1 < seq.len() && seq[i] == a && seq[i + 1] == b {
                        out.push(new_id);
                        i += 2;
                    } else {
                        out.push(seq[i]);
                        i += 1;
                    }
                }
                *seq = out;
            }
        }
        Tokenizer::from_parts(specials.to_vec(), pieces)
    }

    pub fn from_parts(specials: Vec<String>, pieces: Vec<String>) -> Result<Self> {
        let mut piece_ids = BTreeMap::new();
        let mut specials_by_len = Vec::new();
        for (i, s) in specials.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::invalid("empty special token"));
            }
            if specials[..i].contains(s) {
                return Err(Error::invalid(alloc::format!("duplicate special {s:?}")));
            }
            specials_by_len.push((s.clone(), (BYTE_TOKENS + i) as TokenId));
        }
        specials_by_len.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));
        let base = BYTE_TOKENS + specials.len();
        let mut max_piece_chars = 1;
        for (i, p) in pieces.iter().enumerate() {
            if p.chars().count() < 2 && p.is_ascii() {
                return Err(Error::invalid(alloc::format!("piece {p:?} duplicates a byte token")));
            }
            if piece_ids.insert(p.clone(), (base + i) as TokenId).is_some() {
                return Err(Error::invalid(alloc::format!("duplicate piece {p:?}")));
            }
            max_piece_chars = max_piece_chars.max(p.chars().count());
        }
        Ok(Tokenizer { specials, pieces, piece_ids, max_piece_chars, specials_by_len })
    }

    pub fn vocab_size(&self) -> usize {
        BYTE_TOKENS + self.specials.len() + self.pieces.len()
    }

    pub fn specials(&self) -> &[String] {
        &self.specials
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    /// Id of a special token, if registered.
    pub fn special_id(&self, s: &str) -> Option<TokenId> {
        self.specials.iter().position(|x| x == s).map(|i| (BYTE_TOKENS + i) as TokenId)
    }

    /// Human-readable form of a token (bytes are shown as `<0xNN>` when they
    /// are not printable ASCII).
    pub fn token_str(&self, id: TokenId) -> String {
        let id = id as usize;
        if id < BYTE_TOKENS {
            let b = id as u8;
            if b.is_ascii_graphic() || b == b' ' {
                (b as char).to_string()
            } else {
                let mut s = String::new();
                let _ = write!(s, "<0x{b:02X}>");
                s
            }
        } else if id < BYTE_TOKENS + self.specials.len() {
            self.specials[id - BYTE_TOKENS].clone()
        } else {
            self.pieces.get(id - BYTE_TOKENS - self.specials.len()).cloned().unwrap_or_default()
        }
    }

    fn token_bytes(&self, id: TokenId, out: &mut Vec<u8>) {
        let id = id as usize;
        if id < BYTE_TOKENS {
            out.push(id as u8);
        } else if id < BYTE_TOKENS + self.specials.len() {
            out.extend_from_slice(self.specials[id - BYTE_TOKENS].as_bytes());
        } else if let Some(p) = self.pieces.get(id - BYTE_TOKENS - self.specials.len()) {
            out.extend_from_slice(p.as_bytes());
        }
    }

    fn segments<'a>(&self, text: &'a str) -> Vec<Segment<'a>> {
        let mut out = Vec::new();
        let bytes = text.as_bytes();
        let mut plain_start = 0;
        let mut i = 0;
        while i < text.len() {
            if !text.is_char_boundary(i) {
                i += 1;
                continue;
            }
            let mut hit = None;
            for (s, id) in &self.specials_by_len {
                if bytes[i..].starts_with(s.as_bytes()) && self.boundary_ok(text, i, s) {
                    hit = Some((s.len(), *id));
                    break;
                }
            }
            if let Some((len, id)) = hit {
                if plain_start < i {
                    out.push(Segment::Text(&text[plain_start..i]));
                }
                out.push(Segment::Special(id));
                i += len;
                plain_start = i;
            } else {
                i += 1;
            }
        }
        if plain_start < text.len() {
            out.push(Segment::Text(&text[plain_start..]));
        }
        out
    }

    fn boundary_ok(&self, text: &str, at: usize, special: &str) -> bool {
        let first = special.chars().next().map(|c| c.is_alphanumeric()).unwrap_or(false);
        let last = special.chars().next_back().map(|c| c.is_alphanumeric()).unwrap_or(false);
        if first {
            if let Some(prev) = text[..at].chars().next_back() {
                if prev.is_alphanumeric() {
                    return false;
                }
            }
        }
        if last {
            if let Some(next) = text[at + special.len()..].chars().next() {
                if next.is_alphanumeric() {
                    return false;
                }
            }
        }
        true
    }

    fn encode_word(&self, word: &str, out: &mut Vec<TokenId>) {
        let idx: Vec<usize> = word.char_indices().map(|(i, _)| i).chain(core::iter::once(word.len())).collect();
        let n = idx.len() - 1;
        let mut i = 0;
        while i < n {
            let mut matched = false;
            let longest = self.max_piece_chars.min(n - i);
            for len in (2..=longest).rev() {
                if let Some(&id) = self.piece_ids.get(&word[idx[i]..idx[i + len]]) {
                    out.push(id);
                    i += len;
                    matched = true;
                    break;
                }
            }
            if matched {
                continue;
            }
            let ch = &word[idx[i]..idx[i + 1]];
            if let Some(&id) = self.piece_ids.get(ch) {
                out.push(id);
            } else {
                out.extend(ch.bytes().map(|b| b as TokenId));
            }
            i += 1;
        }
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for seg in self.segments(text) {
            match seg {
                Segment::Special(id) => out.push(id),
                Segment::Text(t) => {
                    for w in pre_tokenize(t) {
                        self.encode_word(w, &mut out);
                    }
                }
            }
        }
        out
    }

    /// Raw bytes of a token sequence.
    pub fn decode_bytes(&self, ids: &[TokenId]) -> Vec<u8> {
        let mut out = Vec::new();
        for &id in ids {
            self.token_bytes(id, &mut out);
        }
        out
    }

    /// Decode to text; invalid UTF-8 (possible mid-generation) is replaced.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }
}

enum Segment<'a> {
    Text(&'a str),
    Special(TokenId),
}
