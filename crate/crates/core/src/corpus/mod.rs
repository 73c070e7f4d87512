//! Documents, label sets, saliency masks and pseudo-labelled examples.
//!
//! All character offsets in this crate count Unicode scalar values of the
//! whitespace-normalized document text, not bytes.

mod pseudo;

pub use pseudo::{from_json_line, read_pseudo_examples, to_json_line, write_pseudo_examples};

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("invalid rationale span in document {0:?}")]
    InvalidSpan(String),
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("document {0:?} has empty text")]
    EmptyText(String),
    #[error("invalid label set: {0}")]
    InvalidLabelSet(String),
    #[error("invariant violated for document {doc_id:?}: {reason}")]
    InvariantViolation { doc_id: String, reason: String },
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// Half-open character range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        !self.is_empty() && !other.is_empty() && self.start < other.end && other.start < self.end
    }
}

/// Ordered set of class names. Index `i` maps to the same name for the whole run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelSet {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(CorpusError::InvalidLabelSet("label set is empty".into()));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if name.trim().is_empty() {
                return Err(CorpusError::InvalidLabelSet("blank label name".into()));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(CorpusError::InvalidLabelSet(format!("duplicate label {name:?}")));
            }
        }
        Ok(Self { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }
}

/// Collapses every run of whitespace to one space and trims both ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub doc_id: String,
    /// Whitespace-normalized text.
    pub text: String,
    pub gold_label: Option<usize>,
    /// Sorted, non-overlapping character spans into `text`.
    pub gold_rationale: Option<Vec<Span>>,
}

impl Document {
    /// Builds a validated document. `text` is whitespace-normalized first and
    /// rationale spans are checked against the normalized text.
    pub fn new(
        doc_id: impl Into<String>,
        text: &str,
        gold_label: Option<usize>,
        gold_rationale: Option<Vec<Span>>,
    ) -> Result<Self> {
        let doc_id = doc_id.into();
        let text = normalize_whitespace(text);
        if text.is_empty() {
            return Err(CorpusError::EmptyText(doc_id));
        }
        let gold_rationale = match gold_rationale {
            Some(mut spans) => {
                let len = text.chars().count();
                spans.sort();
                let in_bounds = spans.iter().all(|s| s.start < s.end && s.end <= len);
                let disjoint = spans.windows(2).all(|w| w[0].end <= w[1].start);
                if !in_bounds || !disjoint {
                    return Err(CorpusError::InvalidSpan(doc_id));
                }
                Some(spans)
            }
            None => None,
        };
        Ok(Self {
            doc_id,
            text,
            gold_label,
            gold_rationale,
        })
    }

    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub labels: LabelSet,
    pub split: Split,
}

impl Corpus {
    pub fn new(documents: Vec<Document>, labels: LabelSet, split: Split) -> Result<Self> {
        let mut seen = HashSet::with_capacity(documents.len());
        for doc in &documents {
            if !seen.insert(doc.doc_id.as_str()) {
                return Err(CorpusError::DuplicateId(doc.doc_id.clone()));
            }
            if let Some(label) = doc.gold_label {
                if label >= labels.len() {
                    return Err(CorpusError::UnknownLabel(format!("#{label}")));
                }
            }
        }
        Ok(Self {
            documents,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.doc_id == doc_id)
    }

    pub fn has_gold_labels(&self) -> bool {
        !self.documents.is_empty() && self.documents.iter().all(|d| d.gold_label.is_some())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusRecord {
    id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rationale: Option<Vec<(usize, usize)>>,
}

/// Reads a corpus JSONL file. Blank lines are skipped; everything else must be
/// a well-formed record.
pub fn load_corpus(path: impl AsRef<Path>, labels: &LabelSet, split: Split) -> Result<Corpus> {
    let reader = BufReader::new(File::open(path)?);
    let mut documents = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
            line: i + 1,
            reason: e.to_string(),
        })?;
        let gold_label = match record.label {
            Some(name) => Some(labels.index_of(&name).ok_or(CorpusError::UnknownLabel(name))?),
            None => None,
        };
        let rationale = record
            .rationale
            .map(|spans| spans.into_iter().map(|(s, e)| Span::new(s, e)).collect());
        documents.push(Document::new(record.id, &record.text, gold_label, rationale)?);
    }
    Corpus::new(documents, labels.clone(), split)
}

/// Writes a corpus in the format read by [`load_corpus`].
pub fn write_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for doc in &corpus.documents {
        let record = CorpusRecord {
            id: doc.doc_id.clone(),
            text: doc.text.clone(),
            label: doc
                .gold_label
                .map(|l| corpus.labels.name(l).expect("validated label").to_owned()),
            rationale: doc
                .gold_rationale
                .as_ref()
                .map(|spans| spans.iter().map(|s| (s.start, s.end)).collect()),
        };
        let line = serde_json::to_string(&record).expect("corpus records always serialize");
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Binary per-token saliency vector stored sparsely.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SaliencyMask {
    length: usize,
    salient: BTreeSet<usize>,
}

impl SaliencyMask {
    pub fn new(length: usize, indices: impl IntoIterator<Item = usize>) -> Result<Self, MaskError> {
        let salient: BTreeSet<usize> = indices.into_iter().collect();
        if let Some(&max) = salient.iter().next_back() {
            if max >= length {
                return Err(MaskError { index: max, length });
            }
        }
        Ok(Self { length, salient })
    }

    pub fn empty(length: usize) -> Self {
        Self {
            length,
            salient: BTreeSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn salient_count(&self) -> usize {
        self.salient.len()
    }

    pub fn has_salient(&self) -> bool {
        !self.salient.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.salient.contains(&index)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.salient.iter().copied()
    }

    pub fn index_set(&self) -> &BTreeSet<usize> {
        &self.salient
    }

    pub fn dense(&self) -> Vec<f64> {
        (0..self.length)
            .map(|i| if self.salient.contains(&i) { 1.0 } else { 0.0 })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("salient index {index} out of range for mask of length {length}")]
pub struct MaskError {
    pub index: usize,
    pub length: usize,
}

/// One class query followed by one saliency query.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round_index: usize,
    pub class_label: usize,
    pub salient_words: Vec<String>,
    pub salient_mask: SaliencyMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoExample {
    pub doc_id: String,
    pub final_label: usize,
    pub final_mask: SaliencyMask,
    pub history: Vec<RoundRecord>,
    pub converged: bool,
}

impl PseudoExample {
    /// Assembles an example from its round history. Final label/mask come from
    /// the last record.
    pub fn from_history(doc_id: impl Into<String>, history: Vec<RoundRecord>, converged: bool) -> Result<Self> {
        let doc_id = doc_id.into();
        let last = history
            .last()
            .ok_or_else(|| CorpusError::InvariantViolation {
                doc_id: doc_id.clone(),
                reason: "empty round history".into(),
            })?
            .clone();
        let example = Self {
            doc_id,
            final_label: last.class_label,
            final_mask: last.salient_mask,
            history,
            converged,
        };
        example.validate()?;
        Ok(example)
    }

    pub fn validate(&self) -> Result<()> {
        let violation = |reason: &str| {
            Err(CorpusError::InvariantViolation {
                doc_id: self.doc_id.clone(),
                reason: reason.to_string(),
            })
        };
        let Some(last) = self.history.last() else {
            return violation("empty round history");
        };
        if last.class_label != self.final_label || last.salient_mask != self.final_mask {
            return violation("final label/mask differ from last round");
        }
        if self.history.windows(2).any(|w| w[1].round_index <= w[0].round_index) {
            return violation("round indices not strictly increasing");
        }
        for round in &self.history {
            if round.salient_words.is_empty() == round.salient_mask.has_salient() {
                return violation("salient words and mask disagree on emptiness");
            }
            if round.salient_mask.len() != self.final_mask.len() {
                return violation("mask lengths differ across rounds");
            }
        }
        if self.converged {
            let n = self.history.len();
            if n < 2 {
                return violation("converged with a single round");
            }
            let (a, b) = (&self.history[n - 2], &self.history[n - 1]);
            if a.class_label != b.class_label || a.salient_mask != b.salient_mask {
                return violation("converged but last two rounds differ");
            }
        }
        Ok(())
    }
}
