//! Word-level tokenization with character offsets and a frequency-ranked vocabulary.
//!
//! Position 0 of every encoding is the `[CLS]` token, whose span is empty and
//! therefore never overlaps any text.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::Span;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const MASK: &str = "[MASK]";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const MASK_ID: u32 = 3;

const SPECIALS: [&str; 4] = [PAD, UNK, CLS, MASK];

fn word_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[\p{L}\p{N}]+(?:['’][\p{L}\p{N}]+)*|[^\s\p{L}\p{N}]").expect("valid regex"))
}

/// A token of the pre-tokenized text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Piece {
    pub text: String,
    pub span: Span,
}

/// Splits text into words (letters/digits with inner apostrophes) and single
/// punctuation symbols.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordTokenizer;

impl WordTokenizer {
    pub fn pieces(&self, text: &str) -> Vec<Piece> {
        let offsets = char_offsets(text);
        word_pattern()
            .find_iter(text)
            .map(|m| Piece {
                text: m.as_str().to_lowercase(),
                span: Span::new(offsets[m.start()], offsets[m.end()]),
            })
            .collect()
    }

    /// Spans of the model tokenization: `[CLS]` followed by every piece.
    pub fn token_spans(&self, text: &str) -> Vec<Span> {
        std::iter::once(Span::new(0, 0))
            .chain(self.pieces(text).into_iter().map(|p| p.span))
            .collect()
    }

    /// Token strings aligned with [`WordTokenizer::token_spans`].
    pub fn tokens(&self, text: &str) -> Vec<String> {
        std::iter::once(CLS.to_string())
            .chain(self.pieces(text).into_iter().map(|p| p.text))
            .collect()
    }
}

/// Maps byte offsets (including `len`) to character offsets.
pub(crate) fn char_offsets(text: &str) -> Vec<usize> {
    let mut offsets = vec![0; text.len() + 1];
    let mut chars = 0;
    for (byte, ch) in text.char_indices() {
        for slot in &mut offsets[byte..byte + ch.len_utf8()] {
            *slot = chars;
        }
        chars += 1;
    }
    offsets[text.len()] = chars;
    offsets
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    /// Token ids, `[CLS]` first, truncated to the requested maximum.
    pub ids: Vec<u32>,
    pub spans: Vec<Span>,
    pub tokens: Vec<String>,
    /// Token count before truncation.
    pub full_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Builds a vocabulary from the pieces of `texts`: special tokens first,
    /// then words by descending count with ties broken lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize, min_count: usize) -> Self {
        let tokenizer = WordTokenizer;
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for piece in tokenizer.pieces(text) {
                *counts.entry(piece.text).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .take(max_size.max(SPECIALS.len()))
            .collect();
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str, max_len: usize) -> Encoding {
        let tokenizer = WordTokenizer;
        let spans = tokenizer.token_spans(text);
        let tokens = tokenizer.tokens(text);
        let full_length = spans.len();
        let keep = full_length.min(max_len);
        let ids = tokens[..keep]
            .iter()
            .enumerate()
            .map(|(i, t)| if i == 0 { CLS_ID } else { self.id(t) })
            .collect();
        Encoding {
            ids,
            spans: spans[..keep].to_vec(),
            tokens: tokens[..keep].to_vec(),
            full_length,
        }
    }
}
