//! Pseudo-label JSONL persistence.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusError, LabelSet, PseudoExample, Result, RoundRecord, SaliencyMask};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct PseudoRecord {
    id: String,
    label: String,
    salient_words: Vec<String>,
    salient_indices: Vec<usize>,
    mask_length: usize,
    converged: bool,
    rounds: Vec<RoundEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RoundEntry {
    round: usize,
    label: String,
    salient_words: Vec<String>,
    salient_indices: Vec<usize>,
}

fn label_name(labels: &LabelSet, index: usize, doc_id: &str) -> Result<String> {
    labels
        .name(index)
        .map(str::to_owned)
        .ok_or_else(|| CorpusError::InvariantViolation {
            doc_id: doc_id.to_owned(),
            reason: format!("label index {index} outside label set"),
        })
}

impl PseudoRecord {
    pub(crate) fn from_example(example: &PseudoExample, labels: &LabelSet) -> Result<Self> {
        let last = example.history.last();
        let rounds = example
            .history
            .iter()
            .map(|r| {
                Ok(RoundEntry {
                    round: r.round_index,
                    label: label_name(labels, r.class_label, &example.doc_id)?,
                    salient_words: r.salient_words.clone(),
                    salient_indices: r.salient_mask.indices().collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            id: example.doc_id.clone(),
            label: label_name(labels, example.final_label, &example.doc_id)?,
            salient_words: last.map(|r| r.salient_words.clone()).unwrap_or_default(),
            salient_indices: example.final_mask.indices().collect(),
            mask_length: example.final_mask.len(),
            converged: example.converged,
            rounds,
        })
    }

    pub(crate) fn into_example(self, labels: &LabelSet) -> Result<PseudoExample> {
        let doc_id = self.id;
        let violation = |reason: String| CorpusError::InvariantViolation {
            doc_id: doc_id.clone(),
            reason,
        };
        let lookup = |name: &str| {
            labels
                .index_of(name)
                .ok_or_else(|| CorpusError::UnknownLabel(name.to_owned()))
        };
        let mask =
            |indices: Vec<usize>| SaliencyMask::new(self.mask_length, indices).map_err(|e| violation(e.to_string()));
        let history = self
            .rounds
            .into_iter()
            .map(|r| {
                Ok(RoundRecord {
                    round_index: r.round,
                    class_label: lookup(&r.label)?,
                    salient_words: r.salient_words,
                    salient_mask: mask(r.salient_indices)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let example = PseudoExample {
            doc_id: doc_id.clone(),
            final_label: lookup(&self.label)?,
            final_mask: mask(self.salient_indices)?,
            history,
            converged: self.converged,
        };
        if example
            .history
            .last()
            .is_some_and(|r| r.salient_words != self.salient_words)
        {
            return Err(violation("top-level salient_words differ from last round".into()));
        }
        example.validate()?;
        Ok(example)
    }
}

/// Serializes one example as a single JSON line (no trailing newline).
pub fn to_json_line(example: &PseudoExample, labels: &LabelSet) -> Result<String> {
    let record = PseudoRecord::from_example(example, labels)?;
    Ok(serde_json::to_string(&record).expect("pseudo record serializes"))
}

/// Parses one pseudo-label JSON line; `line_no` is 1-based and used in errors.
pub fn from_json_line(line: &str, line_no: usize, labels: &LabelSet) -> Result<PseudoExample> {
    let record: PseudoRecord = serde_json::from_str(line).map_err(|e| CorpusError::MalformedRecord {
        line: line_no,
        reason: e.to_string(),
    })?;
    record.into_example(labels)
}

pub fn write_pseudo_examples(path: impl AsRef<Path>, examples: &[PseudoExample], labels: &LabelSet) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for example in examples {
        example.validate()?;
        writeln!(out, "{}", to_json_line(example, labels)?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_pseudo_examples(path: impl AsRef<Path>, labels: &LabelSet) -> Result<Vec<PseudoExample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        examples.push(from_json_line(&line, i + 1, labels)?);
    }
    Ok(examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels() -> LabelSet {
        LabelSet::new(["pos", "neg", "other"]).unwrap()
    }

    fn round(i: usize, label: usize, words: &[&str], idx: &[usize], len: usize) -> RoundRecord {
        RoundRecord {
            round_index: i,
            class_label: label,
            salient_words: words.iter().map(|s| s.to_string()).collect(),
            salient_mask: SaliencyMask::new(len, idx.iter().copied()).unwrap(),
        }
    }

    #[test]
    fn empty_list_gives_empty_file() {
        let f = tempfile::NamedTempFile::new().unwrap();
        write_pseudo_examples(f.path(), &[], &labels()).unwrap();
        assert_eq!(std::fs::read_to_string(f.path()).unwrap(), "");
        assert!(read_pseudo_examples(f.path(), &labels()).unwrap().is_empty());
    }

    #[test]
    fn unconverged_three_rounds_layout() {
        let ex = PseudoExample::from_history(
            "doc-1",
            vec![
                round(0, 0, &["good"], &[2], 6),
                round(1, 1, &["bad"], &[4], 6),
                round(2, 0, &["good"], &[2], 6),
            ],
            false,
        )
        .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_pseudo_examples(f.path(), std::slice::from_ref(&ex), &labels()).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        assert_eq!(text.lines().count(), 1);
        let value: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(value["rounds"].as_array().unwrap().len(), 3);
        assert_eq!(value["label"], "pos");
        assert_eq!(value["mask_length"], 6);
        assert_eq!(read_pseudo_examples(f.path(), &labels()).unwrap(), vec![ex]);
    }

    #[test]
    fn converged_with_differing_rounds_is_rejected() {
        let line = r#"{"id":"x","label":"neg","salient_words":["b"],"salient_indices":[2],"mask_length":4,"converged":true,"rounds":[{"round":0,"label":"pos","salient_words":["a"],"salient_indices":[1]},{"round":1,"label":"neg","salient_words":["b"],"salient_indices":[2]}]}"#;
        assert!(matches!(
            from_json_line(line, 1, &labels()),
            Err(CorpusError::InvariantViolation { .. })
        ));
    }

    #[test]
    fn out_of_range_index_is_rejected() {
        let line = r#"{"id":"x","label":"neg","salient_words":["b"],"salient_indices":[4],"mask_length":4,"converged":false,"rounds":[{"round":0,"label":"neg","salient_words":["b"],"salient_indices":[4]}]}"#;
        assert!(matches!(
            from_json_line(line, 1, &labels()),
            Err(CorpusError::InvariantViolation { .. })
        ));
    }

    #[test]
    fn garbage_line_is_malformed() {
        assert!(matches!(
            from_json_line("[1,2]", 7, &labels()),
            Err(CorpusError::MalformedRecord { line: 7, .. })
        ));
    }

    fn arb_example() -> impl Strategy<Value = PseudoExample> {
        (1usize..12, 1usize..5, any::<bool>(), "[a-z]{1,6}")
            .prop_flat_map(|(len, n_rounds, try_converge, id)| {
                let rounds = proptest::collection::vec(
                    (0usize..3, proptest::collection::btree_set(0..len, 0..=len.min(3))),
                    n_rounds,
                );
                (Just(len), Just(try_converge), Just(id), rounds)
            })
            .prop_map(|(len, try_converge, id, rounds)| {
                let mut history: Vec<RoundRecord> = rounds
                    .into_iter()
                    .enumerate()
                    .map(|(i, (label, idx))| {
                        let words = idx.iter().map(|j| format!("w{j}")).collect();
                        RoundRecord {
                            round_index: i,
                            class_label: label,
                            salient_words: words,
                            salient_mask: SaliencyMask::new(len, idx).unwrap(),
                        }
                    })
                    .collect();
                let converged = try_converge && history.len() >= 2;
                if converged {
                    let n = history.len();
                    let mut copy = history[n - 2].clone();
                    copy.round_index = history[n - 1].round_index;
                    history[n - 1] = copy;
                }
                PseudoExample::from_history(id, history, converged).unwrap()
            })
    }

    proptest! {
        #[test]
        fn write_then_read_is_identity(examples in proptest::collection::vec(arb_example(), 0..6)) {
            let f = tempfile::NamedTempFile::new().unwrap();
            write_pseudo_examples(f.path(), &examples, &labels()).unwrap();
            let back = read_pseudo_examples(f.path(), &labels()).unwrap();
            prop_assert_eq!(back, examples);
        }
    }
}
