//! Vocabulary and the deterministic reference tokenizer.
//!
//! The reference tokenizer lowercases, splits on whitespace, and treats every
//! punctuation character as its own token. The six special markers are
//! recognized verbatim and never split.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const SPE: &str = "[SPE]";
pub const MASK: &str = "[MASK]";

/// All special markers, in id order. Ids 0..6 are reserved for them.
pub const SPECIAL_TOKENS: [&str; 6] = [PAD, UNK, CLS, SEP, SPE, MASK];

/// Split `text` into tokens. Special markers survive verbatim; everything else
/// is lowercased, whitespace-separated, with punctuation split off char by char.
pub fn tokenize_text(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    'outer: while i < bytes.len() {
        if bytes[i] == b'[' {
            for special in SPECIAL_TOKENS {
                if text[i..].starts_with(special) {
                    flush(&mut word, &mut tokens);
                    tokens.push(special.to_string());
                    i += special.len();
                    continue 'outer;
                }
            }
        }
        // Safe: we only stop at byte positions that are char boundaries.
        let c = text[i..].chars().next().expect("non-empty remainder");
        if c.is_whitespace() {
            flush(&mut word, &mut tokens);
        } else if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            flush(&mut word, &mut tokens);
            tokens.push(c.to_lowercase().collect());
        }
        i += c.len_utf8();
    }
    flush(&mut word, &mut tokens);
    tokens
}

fn flush(word: &mut String, tokens: &mut Vec<String>) {
    if !word.is_empty() {
        tokens.push(std::mem::take(word));
    }
}

/// Bidirectional token <-> id map with dense ids and the six special tokens
/// at ids 0..6.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build a vocabulary from raw texts. Tokens are collected through the
    /// reference tokenizer and assigned ids in sorted order after the special
    /// tokens, so the same texts always yield the same mapping.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vocabulary {
        let mut seen = std::collections::BTreeSet::new();
        for text in texts {
            for token in tokenize_text(text) {
                if !SPECIAL_TOKENS.contains(&token.as_str()) {
                    seen.insert(token);
                }
            }
        }
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(seen);
        tokens.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// Id of a token, or the [UNK] id when absent.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id_of(token).unwrap_or(Self::UNK_ID)
    }

    /// Encode a text with the reference tokenizer, mapping unknowns to [UNK].
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize_text(text)
            .iter()
            .map(|t| self.id_or_unk(t))
            .collect()
    }

    /// Resolve a verbalizer word to its single token id.
    pub fn resolve_word(&self, word: &str) -> Result<usize> {
        let toks = tokenize_text(word);
        match toks.as_slice() {
            [t] => self.id_of(t).ok_or_else(|| {
                Error::Config(format!("verbalizer word {word:?} is not in the vocabulary"))
            }),
            _ => Err(Error::Config(format!(
                "verbalizer word {word:?} does not map to exactly one token"
            ))),
        }
    }

    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const CLS_ID: usize = 2;
    pub const SEP_ID: usize = 3;
    pub const SPE_ID: usize = 4;
    pub const MASK_ID: usize = 5;

    pub fn is_special_id(id: usize) -> bool {
        id < SPECIAL_TOKENS.len()
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}
