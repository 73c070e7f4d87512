use std::collections::HashSet;

use super::{ClassOracle, OracleError, Result, SaliencyOracle};
use crate::corpus::LabelSet;
use crate::tokenizer::WordTokenizer;

/// Per-label keyword lists, indexed like the label set they were built for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexiconOracleSpec {
    labels: LabelSet,
    keywords: Vec<Vec<String>>,
}

impl LexiconOracleSpec {
    /// `entries` pairs label names with keyword lists; every label needs at
    /// least one keyword. Keywords are lowercased.
    pub fn new<I, K>(labels: &LabelSet, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, K)>,
        K: IntoIterator<Item = String>,
    {
        let mut keywords = vec![Vec::new(); labels.len()];
        for (name, words) in entries {
            let idx = labels
                .index_of(&name)
                .ok_or_else(|| OracleError::UnknownLabel(name.clone()))?;
            keywords[idx] = words
                .into_iter()
                .map(|w| w.trim().to_lowercase())
                .filter(|w| !w.is_empty())
                .collect();
        }
        if let Some(i) = keywords.iter().position(Vec::is_empty) {
            return Err(OracleError::InvalidConfig(format!(
                "no keywords for label {:?}",
                labels.names()[i]
            )));
        }
        Ok(Self {
            labels: labels.clone(),
            keywords,
        })
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn keywords(&self, label: usize) -> &[String] {
        &self.keywords[label]
    }

    fn check_labels(&self, labels: &LabelSet) -> Result<()> {
        if labels != &self.labels {
            return Err(OracleError::InvalidConfig(
                "lexicon built for a different label set".into(),
            ));
        }
        Ok(())
    }
}

/// Keyword-count classifier: score = keyword hits in the text plus
/// `hint_weight` × keyword hits among the hints; ties go to the lowest index.
#[derive(Debug, Clone)]
pub struct LexiconClassOracle {
    spec: LexiconOracleSpec,
    hint_weight: usize,
}

impl LexiconClassOracle {
    pub fn new(spec: LexiconOracleSpec) -> Self {
        Self { spec, hint_weight: 1 }
    }

    pub fn with_hint_weight(mut self, weight: usize) -> Self {
        self.hint_weight = weight;
        self
    }

    pub fn scores(&self, text: &str, hints: Option<&[String]>) -> Vec<usize> {
        let words: Vec<String> = WordTokenizer.pieces(text).into_iter().map(|p| p.text).collect();
        let hint_words: Vec<String> = hints
            .unwrap_or_default()
            .iter()
            .flat_map(|h| WordTokenizer.pieces(h).into_iter().map(|p| p.text))
            .collect();
        self.spec
            .keywords
            .iter()
            .map(|kws| {
                let hits = |ws: &[String]| ws.iter().filter(|w| kws.contains(w)).count();
                hits(&words) + self.hint_weight * hits(&hint_words)
            })
            .collect()
    }
}

impl ClassOracle for LexiconClassOracle {
    fn classify(&self, text: &str, labels: &LabelSet, hints: Option<&[String]>) -> Result<usize> {
        self.spec.check_labels(labels)?;
        let scores = self.scores(text, hints);
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        Ok(best)
    }
}

/// Returns the label's keywords that occur in the text, in order of first
/// occurrence.
#[derive(Debug, Clone)]
pub struct LexiconSaliencyOracle {
    spec: LexiconOracleSpec,
}

impl LexiconSaliencyOracle {
    pub fn new(spec: LexiconOracleSpec) -> Self {
        Self { spec }
    }
}

impl SaliencyOracle for LexiconSaliencyOracle {
    fn salient_words(&self, text: &str, label_name: &str) -> Result<Vec<String>> {
        let idx = self
            .spec
            .labels
            .index_of(label_name)
            .ok_or_else(|| OracleError::UnknownLabel(label_name.to_owned()))?;
        let keywords = &self.spec.keywords[idx];
        let mut seen = HashSet::new();
        Ok(WordTokenizer
            .pieces(text)
            .into_iter()
            .filter(|p| keywords.contains(&p.text) && seen.insert(p.text.clone()))
            .map(|p| p.text)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{query_class, query_saliency};

    fn setup() -> (LabelSet, LexiconOracleSpec) {
        let labels = LabelSet::new(["sports", "business"]).unwrap();
        let spec = LexiconOracleSpec::new(
            &labels,
            [
                ("sports".to_string(), vec!["game".to_string()]),
                ("business".to_string(), vec!["stock".to_string(), "prices".to_string()]),
            ],
        )
        .unwrap();
        (labels, spec)
    }

    #[test]
    fn keyword_count_decides() {
        let (labels, spec) = setup();
        let oracle = LexiconClassOracle::new(spec);
        assert_eq!(query_class(&oracle, "great game tonight", &labels, None).unwrap(), 0);
        assert_eq!(query_class(&oracle, "Stock prices fell", &labels, None).unwrap(), 1);
    }

    #[test]
    fn no_hits_falls_back_to_lowest_index() {
        let (labels, spec) = setup();
        let oracle = LexiconClassOracle::new(spec);
        assert_eq!(query_class(&oracle, "nothing relevant here", &labels, None).unwrap(), 0);
    }

    #[test]
    fn saliency_returns_present_keywords_in_order() {
        let (labels, spec) = setup();
        let oracle = LexiconSaliencyOracle::new(spec);
        assert_eq!(
            query_saliency(&oracle, "stock prices fell", "business", &labels).unwrap(),
            vec!["stock", "prices"]
        );
        assert!(query_saliency(&oracle, "a quiet day", "business", &labels)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn spec_requires_keywords_for_every_label() {
        let labels = LabelSet::new(["a", "b"]).unwrap();
        let missing = LexiconOracleSpec::new(&labels, [("a".to_string(), vec!["x".to_string()])]);
        assert!(matches!(missing, Err(OracleError::InvalidConfig(_))));
        let unknown = LexiconOracleSpec::new(&labels, [("zz".to_string(), vec!["x".to_string()])]);
        assert!(matches!(unknown, Err(OracleError::UnknownLabel(_))));
    }

    #[test]
    fn wrong_label_set_is_rejected() {
        let (_, spec) = setup();
        let other = LabelSet::new(["x", "y"]).unwrap();
        assert!(LexiconClassOracle::new(spec).classify("game", &other, None).is_err());
    }

    #[test]
    fn repeated_calls_are_pure() {
        let (labels, spec) = setup();
        let oracle = LexiconClassOracle::new(spec).with_hint_weight(2);
        let hints = vec!["stock".to_string()];
        let first = oracle.classify("game game stock", &labels, Some(&hints)).unwrap();
        for _ in 0..10 {
            assert_eq!(
                oracle.classify("game game stock", &labels, Some(&hints)).unwrap(),
                first
            );
        }
        assert_eq!(first, 1);
    }
}
