//! Class and saliency oracles, prompt construction, answer mapping and
//! word-to-token alignment.

mod generative;
mod lexicon;
pub mod mock;
mod prompt;
mod remote;

pub use generative::{GenerativeClassOracle, GenerativeSaliencyOracle, InProcessGenerator, TextGenerator};
pub use lexicon::{LexiconClassOracle, LexiconOracleSpec, LexiconSaliencyOracle};
pub use prompt::{
    build_class_prompt, build_saliency_prompt, map_answer_to_label, PromptRole, PromptTemplate, PromptTemplates,
};
pub use remote::{HttpGenerator, RemoteConfig, ENV_CLASS_URL, ENV_SALIENCY_URL, ENV_TOKEN};

use thiserror::Error;

use crate::corpus::{LabelSet, SaliencyMask, Span};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("oracle unavailable: {0}")]
    Unavailable(String),
    #[error("answer {0:?} does not map to any label")]
    UnmappableAnswer(String),
    #[error("prompt template mismatch: {0}")]
    TemplateMismatch(String),
    #[error("oracle returned label index {index} for a label set of size {size}")]
    InvalidLabelIndex { index: usize, size: usize },
    #[error("label {0:?} is not in the active label set")]
    UnknownLabel(String),
    #[error("malformed oracle response: {0}")]
    BadResponse(String),
    #[error("invalid oracle configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = OracleError> = std::result::Result<T, E>;

/// What the round engine needs to know to schedule queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Capabilities {
    /// `None` means any number of concurrent queries is safe.
    pub max_concurrency: Option<usize>,
}

impl Capabilities {
    pub fn unbounded() -> Self {
        Self { max_concurrency: None }
    }

    pub fn serial() -> Self {
        Self {
            max_concurrency: Some(1),
        }
    }
}

/// Predicts exactly one label for a document, optionally guided by hint words.
pub trait ClassOracle: Send + Sync {
    fn classify(&self, text: &str, labels: &LabelSet, hints: Option<&[String]>) -> Result<usize>;

    fn capabilities(&self) -> Capabilities {
        Capabilities::unbounded()
    }
}

/// Extracts words/phrases from a document that support a given label.
pub trait SaliencyOracle: Send + Sync {
    fn salient_words(&self, text: &str, label_name: &str) -> Result<Vec<String>>;

    fn capabilities(&self) -> Capabilities {
        Capabilities::unbounded()
    }
}

pub fn query_class(oracle: &dyn ClassOracle, text: &str, labels: &LabelSet, hints: Option<&[String]>) -> Result<usize> {
    let index = oracle.classify(text, labels, hints)?;
    if index >= labels.len() {
        return Err(OracleError::InvalidLabelIndex {
            index,
            size: labels.len(),
        });
    }
    Ok(index)
}

/// Queries the saliency oracle and keeps only answers that occur in `text`
/// (case-insensitive, whitespace-normalized). Duplicates are removed.
pub fn query_saliency(
    oracle: &dyn SaliencyOracle,
    text: &str,
    label_name: &str,
    labels: &LabelSet,
) -> Result<Vec<String>> {
    if !labels.contains(label_name) {
        return Err(OracleError::UnknownLabel(label_name.to_owned()));
    }
    let haystack = normalize_for_match(text);
    let mut kept: Vec<String> = Vec::new();
    for word in oracle.salient_words(text, label_name)? {
        let needle = normalize_for_match(&word);
        if needle.is_empty() || !haystack.contains(&needle) {
            log::debug!("dropping saliency answer {word:?}: not found in document");
            continue;
        }
        if !kept.iter().any(|k| normalize_for_match(k) == needle) {
            kept.push(word.split_whitespace().collect::<Vec<_>>().join(" "));
        }
    }
    Ok(kept)
}

pub(crate) fn normalize_for_match(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Splits a free-text extractive answer into words: whitespace and list
/// separators split, surrounding punctuation is stripped.
pub fn split_answer_words(answer: &str) -> Vec<String> {
    answer
        .split(|c: char| c.is_whitespace() || matches!(c, ',' | ';'))
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|w| !w.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Count of words that could not be located during alignment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AlignmentStats {
    pub matched_words: usize,
    pub dropped_words: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{spans} token spans supplied for a tokenization of length {length}")]
pub struct LengthMismatch {
    pub spans: usize,
    pub length: usize,
}

pub fn align_words_to_mask(
    words: &[String],
    tokenized_length: usize,
    token_spans: &[Span],
    text: &str,
) -> Result<SaliencyMask, LengthMismatch> {
    align_words_with_stats(words, tokenized_length, token_spans, text).map(|(mask, _)| mask)
}

/// Marks every token whose span overlaps any case-insensitive occurrence of any
/// word. All occurrences count, not only the first.
pub fn align_words_with_stats(
    words: &[String],
    tokenized_length: usize,
    token_spans: &[Span],
    text: &str,
) -> Result<(SaliencyMask, AlignmentStats), LengthMismatch> {
    if token_spans.len() != tokenized_length {
        return Err(LengthMismatch {
            spans: token_spans.len(),
            length: tokenized_length,
        });
    }
    let haystack: Vec<char> = text.chars().collect();
    let mut stats = AlignmentStats::default();
    let mut salient = Vec::new();
    for word in words {
        let needle: Vec<char> = word.chars().collect();
        let occurrences = find_all_ci(&haystack, &needle);
        if occurrences.is_empty() {
            stats.dropped_words += 1;
            continue;
        }
        stats.matched_words += 1;
        for occ in occurrences {
            salient.extend(
                token_spans
                    .iter()
                    .enumerate()
                    .filter(|(_, span)| span.overlaps(&occ))
                    .map(|(i, _)| i),
            );
        }
    }
    let mask = SaliencyMask::new(tokenized_length, salient).expect("indices come from enumerate over token_spans");
    Ok((mask, stats))
}

fn chars_eq_ci(a: char, b: char) -> bool {
    a == b || a.to_lowercase().eq(b.to_lowercase())
}

fn find_all_ci(haystack: &[char], needle: &[char]) -> Vec<Span> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return Vec::new();
    }
    (0..=haystack.len() - needle.len())
        .filter(|&start| needle.iter().zip(&haystack[start..]).all(|(&n, &h)| chars_eq_ci(n, h)))
        .map(|start| Span::new(start, start + needle.len()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::WordTokenizer;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeSet;

    fn words(ws: &[&str]) -> Vec<String> {
        ws.iter().map(|s| s.to_string()).collect()
    }

    fn per_word_spans(text: &str) -> Vec<Span> {
        let mut spans = Vec::new();
        let mut pos = 0;
        for w in text.split(' ') {
            let n = w.chars().count();
            spans.push(Span::new(pos, pos + n));
            pos += n + 1;
        }
        spans
    }

    #[test]
    fn empty_word_list_gives_empty_mask() {
        let spans = per_word_spans("a b c");
        let mask = align_words_to_mask(&[], 3, &spans, "a b c").unwrap();
        assert_eq!(mask.len(), 3);
        assert!(!mask.has_salient());
    }

    #[test]
    fn single_word_maps_to_its_token() {
        let spans = per_word_spans("a b c");
        let mask = align_words_to_mask(&words(&["b"]), 3, &spans, "a b c").unwrap();
        assert_eq!(mask.indices().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn length_mismatch_is_reported() {
        let spans = per_word_spans("a b c");
        assert!(align_words_to_mask(&words(&["b"]), 4, &spans, "a b c").is_err());
    }

    #[test]
    fn every_occurrence_is_marked_and_missing_words_dropped() {
        let text = "Game on, game over";
        let spans = WordTokenizer.token_spans(text);
        let (mask, stats) = align_words_with_stats(&words(&["game", "missing"]), spans.len(), &spans, text).unwrap();
        assert_eq!(mask.indices().collect::<Vec<_>>(), vec![1, 4]);
        assert_eq!(
            stats,
            AlignmentStats {
                matched_words: 1,
                dropped_words: 1
            }
        );
    }

    #[test]
    fn subword_pieces_are_all_marked() {
        // "playing" tokenized as "play" + "ing"
        let text = "kids playing outside";
        let spans = vec![Span::new(0, 4), Span::new(5, 9), Span::new(9, 12), Span::new(13, 20)];
        let mask = align_words_to_mask(&words(&["playing"]), 4, &spans, text).unwrap();
        assert_eq!(mask.indices().collect::<Vec<_>>(), vec![1, 2]);
    }

    /// Independent checker: marks characters covered by any occurrence, then
    /// flags tokens containing a marked character.
    fn brute_force(words: &[String], spans: &[Span], text: &str) -> BTreeSet<usize> {
        let lower: Vec<char> = text.to_lowercase().chars().collect();
        let mut covered = vec![false; lower.len()];
        for w in words {
            let wl: Vec<char> = w.to_lowercase().chars().collect();
            if wl.is_empty() || wl.len() > lower.len() {
                continue;
            }
            for s in 0..=lower.len() - wl.len() {
                if lower[s..s + wl.len()] == wl[..] {
                    covered[s..s + wl.len()].iter_mut().for_each(|c| *c = true);
                }
            }
        }
        spans
            .iter()
            .enumerate()
            .filter(|(_, sp)| (sp.start..sp.end).any(|c| covered[c]))
            .map(|(i, _)| i)
            .collect()
    }

    #[test]
    fn matches_brute_force_on_random_subword_fixtures() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let alphabet = ['a', 'b', 'c', 'd'];
        for _ in 0..50 {
            let n_words = rng.random_range(1..8);
            let ws: Vec<String> = (0..n_words)
                .map(|_| {
                    let len = rng.random_range(1..6);
                    (0..len).map(|_| alphabet[rng.random_range(0..4)]).collect()
                })
                .collect();
            let text = ws.join(" ");
            // random subword segmentation of each word
            let mut spans = Vec::new();
            let mut pos = 0;
            for w in &ws {
                let len = w.chars().count();
                let mut start = pos;
                while start < pos + len {
                    let piece = rng.random_range(1..=(pos + len - start));
                    spans.push(Span::new(start, start + piece));
                    start += piece;
                }
                pos += len + 1;
            }
            let queries: Vec<String> = (0..rng.random_range(0..4))
                .map(|_| {
                    let len = rng.random_range(1..4);
                    (0..len).map(|_| alphabet[rng.random_range(0..4)]).collect()
                })
                .collect();
            let mask = align_words_to_mask(&queries, spans.len(), &spans, &text).unwrap();
            assert_eq!(
                mask.index_set(),
                &brute_force(&queries, &spans, &text),
                "{text} {queries:?}"
            );
        }
    }

    proptest! {
        #[test]
        fn adding_a_word_never_removes_salient_tokens(
            text_words in proptest::collection::vec("[a-c]{1,4}", 1..10),
            base in proptest::collection::vec("[a-c]{1,3}", 0..4),
            extra in "[a-c]{1,3}",
        ) {
            let text = text_words.join(" ");
            let spans = WordTokenizer.token_spans(&text);
            let before = align_words_to_mask(&base, spans.len(), &spans, &text).unwrap();
            let mut more = base.clone();
            more.push(extra);
            let after = align_words_to_mask(&more, spans.len(), &spans, &text).unwrap();
            prop_assert!(before.index_set().is_subset(after.index_set()));
        }
    }

    #[test]
    fn split_answer_words_handles_phrases() {
        assert_eq!(
            split_answer_words("really don't like"),
            words(&["really", "don't", "like"])
        );
        assert_eq!(
            split_answer_words(" stock, prices; \"fell\". "),
            words(&["stock", "prices", "fell"])
        );
        assert!(split_answer_words(" ... ").is_empty());
    }

    struct Fixed(Vec<String>);

    impl SaliencyOracle for Fixed {
        fn salient_words(&self, _: &str, _: &str) -> Result<Vec<String>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn saliency_answers_absent_from_text_are_dropped() {
        let labels = LabelSet::new(["pos", "neg"]).unwrap();
        let oracle = Fixed(words(&["Like", "hate", "like", "green  bay"]));
        let got = query_saliency(&oracle, "I like the Green Bay packers", "pos", &labels).unwrap();
        assert_eq!(got, words(&["Like", "green bay"]));
        assert!(matches!(
            query_saliency(&oracle, "x", "sports", &labels),
            Err(OracleError::UnknownLabel(_))
        ));
    }

    struct OutOfRange;

    impl ClassOracle for OutOfRange {
        fn classify(&self, _: &str, _: &LabelSet, _: Option<&[String]>) -> Result<usize> {
            Ok(5)
        }
    }

    #[test]
    fn out_of_range_class_answer_is_rejected() {
        let labels = LabelSet::new(["pos", "neg"]).unwrap();
        assert!(matches!(
            query_class(&OutOfRange, "x", &labels, None),
            Err(OracleError::InvalidLabelIndex { index: 5, size: 2 })
        ));
    }
}
