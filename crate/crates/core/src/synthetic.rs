//! Planted-keyword corpora: every document carries one to three keywords of
//! its class inside neutral filler, and the keyword spans are its rationale.

use std::ops::RangeInclusive;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Document, LabelSet, Span, Split};
use crate::oracles::LexiconOracleSpec;

pub const LABELS: [&str; 2] = ["sports", "business"];

pub const SPORTS_KEYWORDS: [&str; 8] = [
    "goal",
    "match",
    "league",
    "coach",
    "tournament",
    "striker",
    "referee",
    "championship",
];

pub const BUSINESS_KEYWORDS: [&str; 8] = [
    "revenue",
    "shares",
    "merger",
    "investors",
    "profit",
    "earnings",
    "market",
    "dividend",
];

pub const FILLER: [&str; 60] = [
    "the", "a", "of", "and", "to", "in", "on", "with", "after", "before", "people", "day", "week", "morning",
    "evening", "city", "report", "news", "said", "told", "local", "new", "old", "long", "short", "time", "year",
    "today", "group", "public", "plan", "event", "story", "during", "while", "again", "around", "several", "many",
    "some", "early", "late", "quite", "really", "about", "from", "over", "under", "near", "weather", "river", "bridge",
    "north", "south", "family", "friends", "music", "garden", "street", "village",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticConfig {
    pub n_docs: usize,
    pub seed: u64,
    pub keywords_per_doc: RangeInclusive<usize>,
    pub filler_per_doc: RangeInclusive<usize>,
    pub id_prefix: String,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_docs: 400,
            seed: 0,
            keywords_per_doc: 1..=3,
            filler_per_doc: 8..=20,
            id_prefix: "doc".into(),
        }
    }
}

pub fn labels() -> LabelSet {
    LabelSet::new(LABELS).expect("two distinct labels")
}

pub fn keywords(label: usize) -> &'static [&'static str] {
    match label {
        0 => &SPORTS_KEYWORDS,
        _ => &BUSINESS_KEYWORDS,
    }
}

/// Keyword lexicon matching the planted vocabulary, for the lexicon oracles.
pub fn lexicon() -> LexiconOracleSpec {
    let entries = LABELS
        .iter()
        .enumerate()
        .map(|(i, name)| (name.to_string(), keywords(i).iter().map(|k| k.to_string())));
    LexiconOracleSpec::new(&labels(), entries).expect("every label has keywords")
}

/// Classes alternate so the corpus is balanced; keyword choice and placement
/// are drawn from `cfg.seed`.
pub fn generate(cfg: &SyntheticConfig, split: Split) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut documents = Vec::with_capacity(cfg.n_docs);
    for i in 0..cfg.n_docs {
        let label = i % LABELS.len();
        let n_keywords = rng.random_range(cfg.keywords_per_doc.clone());
        let n_filler = rng.random_range(cfg.filler_per_doc.clone());
        let planted: Vec<&str> = keywords(label).choose_multiple(&mut rng, n_keywords).copied().collect();
        let mut words: Vec<(&str, bool)> = (0..n_filler)
            .map(|_| (*FILLER.choose(&mut rng).expect("non-empty filler"), false))
            .collect();
        for kw in planted {
            let at = rng.random_range(0..=words.len());
            words.insert(at, (kw, true));
        }
        let mut text = String::new();
        let mut rationale = Vec::new();
        for (k, (word, is_keyword)) in words.iter().enumerate() {
            if k > 0 {
                text.push(' ');
            }
            let start = text.chars().count();
            text.push_str(word);
            if *is_keyword {
                rationale.push(Span::new(start, start + word.chars().count()));
            }
        }
        text.push('.');
        documents.push(
            Document::new(format!("{}-{i:04}", cfg.id_prefix), &text, Some(label), Some(rationale))
                .expect("generated spans are in bounds and disjoint"),
        );
    }
    Corpus::new(documents, labels(), split).expect("unique ids and valid labels")
}
