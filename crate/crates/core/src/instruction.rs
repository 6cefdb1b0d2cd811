//! Instruction parsing: tokenization, action keywords and noun extraction.
//!
//! Keyword grammar, checked in this order (first match wins):
//!
//! 1. `<n>x large|larger` → `Resize(n)`, `<n>x small|smaller` → `Resize(1/n)`
//! 2. `remove` → `Remove`
//! 3. the phrase `change the background`, or a reference background supplied
//!    alongside the text → `BackgroundSwap`
//! 4. anything else → `Attribute`
//!
//! A resize keyword together with `remove`, or two different resize factors,
//! is rejected as ambiguous.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Attribute,
    Resize { factor: f64 },
    Remove,
    BackgroundSwap,
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Attribute => "attribute",
            Action::Resize { .. } => "resize",
            Action::Remove => "remove",
            Action::BackgroundSwap => "background_swap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedInstruction {
    pub raw: String,
    pub tokens: Vec<String>,
    pub nouns: Vec<String>,
    pub action: Action,
    pub descriptive_text: String,
}

impl ParsedInstruction {
    /// Tokens of the descriptive text, i.e. what the generator conditions on.
    pub fn descriptive_tokens(&self) -> Vec<String> {
        tokenize(&self.descriptive_text).into_iter().map(|t| t.text).collect()
    }
}

const BUILTIN_NOUNS: &[&str] = &[
    "circle", "square", "triangle", "shape", "object", "ball", "box", "block", "disc", "disk", "bird", "belly",
    "wing", "wings", "head", "tail", "beak", "eye", "eyes", "feather", "feathers", "crown", "breast", "throat",
    "book", "dog", "puppy", "cat", "kitten", "person", "man", "woman", "car", "bus", "truck", "horse", "sheep",
    "cow", "flower", "tree", "grass", "sky", "background", "table", "chair", "cup", "plate", "pizza", "cake",
];

const SIZE_UP: &[&str] = &["large", "larger"];
const SIZE_DOWN: &[&str] = &["small", "smaller"];

#[derive(Debug, Clone)]
struct Token {
    text: String,
    start: usize,
    end: usize,
}

fn token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)[0-9]+(?:\.[0-9]+)?x\b|[\p{L}\p{N}]+").expect("static regex"))
}

fn factor_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^([0-9]+(?:\.[0-9]+)?)x$").expect("static regex"))
}

fn tokenize(text: &str) -> Vec<Token> {
    token_regex()
        .find_iter(text)
        .map(|m| Token {
            text: m.as_str().to_lowercase(),
            start: m.start(),
            end: m.end(),
        })
        .collect()
}

/// Keyword occurrences found in a token list, with the token indices each
/// one covers.
#[derive(Debug, Default)]
struct KeywordHits {
    resize: Vec<(f64, [usize; 2])>,
    remove: Vec<usize>,
    background: Vec<[usize; 3]>,
}

impl KeywordHits {
    fn scan(tokens: &[Token]) -> Self {
        let mut hits = KeywordHits::default();
        for (i, tok) in tokens.iter().enumerate() {
            if let (Some(caps), Some(next)) = (factor_regex().captures(&tok.text), tokens.get(i + 1)) {
                let n: f64 = caps[1].parse().unwrap_or(0.0);
                if n.is_finite() && n > 0.0 {
                    if SIZE_UP.contains(&next.text.as_str()) {
                        hits.resize.push((n, [i, i + 1]));
                    } else if SIZE_DOWN.contains(&next.text.as_str()) {
                        hits.resize.push((1.0 / n, [i, i + 1]));
                    }
                }
            }
            if tok.text == "remove" {
                hits.remove.push(i);
            }
            if tok.text == "change"
                && tokens.get(i + 1).is_some_and(|t| t.text == "the")
                && tokens.get(i + 2).is_some_and(|t| t.text == "background")
            {
                hits.background.push([i, i + 1, i + 2]);
            }
        }
        hits
    }

    fn covered(&self) -> BTreeSet<usize> {
        let mut set = BTreeSet::new();
        for (_, idx) in &self.resize {
            set.extend(idx);
        }
        set.extend(&self.remove);
        for idx in &self.background {
            set.extend(idx);
        }
        set
    }

    fn is_empty(&self) -> bool {
        self.resize.is_empty() && self.remove.is_empty() && self.background.is_empty()
    }
}

/// Removes every keyword occurrence, repeating until none are left so that
/// the result never re-forms a keyword.
fn strip_keywords(raw: &str) -> String {
    let mut text = raw.to_string();
    loop {
        let tokens = tokenize(&text);
        let hits = KeywordHits::scan(&tokens);
        if hits.is_empty() {
            break;
        }
        let covered = hits.covered();
        let mut next = String::with_capacity(text.len());
        let mut cursor = 0;
        for i in covered {
            next.push_str(&text[cursor..tokens[i].start]);
            next.push(' ');
            cursor = tokens[i].end;
        }
        next.push_str(&text[cursor..]);
        text = next;
    }
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Instruction parser with a noun lexicon.
#[derive(Debug, Clone)]
pub struct InstructionParser {
    lexicon: BTreeSet<String>,
}

impl Default for InstructionParser {
    fn default() -> Self {
        Self {
            lexicon: BUILTIN_NOUNS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl InstructionParser {
    /// Built-in nouns plus the given class labels (lowercased).
    pub fn with_labels<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut p = Self::default();
        p.extend_lexicon(labels);
        p
    }

    pub fn extend_lexicon<I, S>(&mut self, words: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        self.lexicon.extend(words.into_iter().map(|w| w.as_ref().trim().to_lowercase()).filter(|w| !w.is_empty()));
    }

    /// Loads a lexicon file: one noun per line, blank lines ignored.
    pub fn load_lexicon(&mut self, text: &str) {
        self.extend_lexicon(text.lines());
    }

    pub fn is_noun(&self, word: &str) -> bool {
        self.lexicon.contains(word)
    }

    fn noun_form(&self, token: &str) -> Option<String> {
        if self.lexicon.contains(token) {
            return Some(token.to_string());
        }
        let stem = token.strip_suffix('s')?;
        self.lexicon.contains(stem).then(|| stem.to_string())
    }

    pub fn parse(&self, raw: &str) -> Result<ParsedInstruction> {
        self.parse_with_background(raw, false)
    }

    /// Parses `raw`; `has_background` marks that a reference background image
    /// accompanies the instruction.
    pub fn parse_with_background(&self, raw: &str, has_background: bool) -> Result<ParsedInstruction> {
        let tokens = tokenize(raw);
        let hits = KeywordHits::scan(&tokens);

        let mut factors: Vec<f64> = hits.resize.iter().map(|(f, _)| *f).collect();
        factors.dedup_by(|a, b| a == b);
        factors.sort_by(|a, b| a.total_cmp(b));
        factors.dedup();
        if !factors.is_empty() && !hits.remove.is_empty() {
            return Err(Error::Ambiguity(format!(
                "`{raw}` asks to both resize and remove the object"
            )));
        }
        if factors.len() > 1 {
            return Err(Error::Ambiguity(format!("`{raw}` carries conflicting resize factors {factors:?}")));
        }

        let action = if let Some(factor) = factors.first() {
            Action::Resize { factor: *factor }
        } else if !hits.remove.is_empty() {
            Action::Remove
        } else if !hits.background.is_empty() || has_background {
            Action::BackgroundSwap
        } else {
            Action::Attribute
        };

        let descriptive_text = strip_keywords(raw);
        let mut nouns = Vec::new();
        for tok in tokenize(&descriptive_text) {
            if let Some(n) = self.noun_form(&tok.text) {
                if !nouns.contains(&n) {
                    nouns.push(n);
                }
            }
        }

        Ok(ParsedInstruction {
            raw: raw.to_string(),
            tokens: tokens.into_iter().map(|t| t.text).collect(),
            nouns,
            action,
            descriptive_text,
        })
    }
}

/// Parses with the built-in lexicon.
pub fn parse_instruction(raw: &str) -> Result<ParsedInstruction> {
    InstructionParser::default().parse(raw)
}
