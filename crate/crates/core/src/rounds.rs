//! Iterative mutual enhancement of pseudo class labels and saliency labels.
//!
//! Round 0 queries the class oracle on the bare text and then the saliency
//! oracle on that label. Each later round feeds the previous salient words to
//! the class oracle as hints and re-queries saliency on the new label. A
//! document stops once two consecutive rounds agree, or when the round budget
//! is spent.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, Corpus, CorpusError, Document, LabelSet, PseudoExample, RoundRecord};
use crate::oracles::{align_words_with_stats, query_class, query_saliency, ClassOracle, OracleError, SaliencyOracle};
use crate::tokenizer::WordTokenizer;

pub const MAX_ROUNDS_LIMIT: usize = 3;

#[derive(Debug, Error)]
pub enum RoundError {
    #[error("document {doc_id:?}: {source}")]
    Oracle {
        doc_id: String,
        #[source]
        source: OracleError,
    },
    #[error("{failed} of {total} documents failed; first failure: {first}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: String,
        /// Whether every failure was an oracle outage.
        all_unavailable: bool,
    },
    #[error("invalid round configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = RoundError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptySaliencyPolicy {
    /// Stop iterating and keep the current label.
    #[default]
    KeepLabelStop,
    /// Run an unhinted class query as the next round.
    RetryWithoutHints,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundConfig {
    /// Enhanced rounds after round 0.
    pub max_rounds: usize,
    pub require_mask_equality: bool,
    pub on_empty_saliency: EmptySaliencyPolicy,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            max_rounds: 2,
            require_mask_equality: true,
            on_empty_saliency: EmptySaliencyPolicy::KeepLabelStop,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_rounds > MAX_ROUNDS_LIMIT {
            return Err(RoundError::InvalidConfig(format!(
                "max_rounds {} exceeds {MAX_ROUNDS_LIMIT}",
                self.max_rounds
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
pub struct Oracles<'a> {
    pub class: &'a dyn ClassOracle,
    pub saliency: &'a dyn SaliencyOracle,
}

impl Oracles<'_> {
    /// Worker limit honoring both oracles' declared concurrency.
    pub fn concurrency_limit(&self, requested: usize) -> usize {
        [
            Some(requested.max(1)),
            self.class.capabilities().max_concurrency,
            self.saliency.capabilities().max_concurrency,
        ]
        .into_iter()
        .flatten()
        .min()
        .unwrap_or(1)
        .max(1)
    }
}

fn annotate(doc: &Document) -> impl Fn(OracleError) -> RoundError + '_ {
    move |source| RoundError::Oracle {
        doc_id: doc.doc_id.clone(),
        source,
    }
}

fn saliency_round(
    doc: &Document,
    labels: &LabelSet,
    oracles: Oracles<'_>,
    round_index: usize,
    class_label: usize,
) -> Result<RoundRecord> {
    let label_name = labels.name(class_label).expect("validated label index");
    let words = query_saliency(oracles.saliency, &doc.text, label_name, labels).map_err(annotate(doc))?;
    let spans = WordTokenizer.token_spans(&doc.text);
    // keep only words that land on at least one token, so words and mask agree
    let mut kept = Vec::with_capacity(words.len());
    for word in words {
        let (_, stats) = align_words_with_stats(std::slice::from_ref(&word), spans.len(), &spans, &doc.text)
            .expect("spans come from the same tokenization");
        if stats.matched_words == 1 {
            kept.push(word);
        }
    }
    let (salient_mask, _) =
        align_words_with_stats(&kept, spans.len(), &spans, &doc.text).expect("spans come from the same tokenization");
    Ok(RoundRecord {
        round_index,
        class_label,
        salient_words: kept,
        salient_mask,
    })
}

pub fn run_initial_round(doc: &Document, labels: &LabelSet, oracles: Oracles<'_>) -> Result<RoundRecord> {
    let label = query_class(oracles.class, &doc.text, labels, None).map_err(annotate(doc))?;
    saliency_round(doc, labels, oracles, 0, label)
}

pub fn run_enhanced_round(
    doc: &Document,
    labels: &LabelSet,
    prev: &RoundRecord,
    oracles: Oracles<'_>,
) -> Result<RoundRecord> {
    let label = query_class(oracles.class, &doc.text, labels, Some(&prev.salient_words)).map_err(annotate(doc))?;
    saliency_round(doc, labels, oracles, prev.round_index + 1, label)
}

/// Label equality, plus mask set-equality when the config requires it.
pub fn has_converged(current: &RoundRecord, previous: &RoundRecord, cfg: &RoundConfig) -> bool {
    debug_assert_eq!(current.round_index, previous.round_index + 1);
    current.class_label == previous.class_label
        && (!cfg.require_mask_equality || current.salient_mask == previous.salient_mask)
}

/// Runs all rounds for one document.
pub fn label_document(
    doc: &Document,
    labels: &LabelSet,
    oracles: Oracles<'_>,
    cfg: &RoundConfig,
) -> Result<PseudoExample> {
    let mut history = vec![run_initial_round(doc, labels, oracles)?];
    let mut converged = false;
    for _ in 0..cfg.max_rounds {
        let prev = history.last().expect("history starts non-empty");
        let next = if prev.salient_words.is_empty() {
            match cfg.on_empty_saliency {
                EmptySaliencyPolicy::KeepLabelStop => break,
                EmptySaliencyPolicy::RetryWithoutHints => {
                    let mut retry = run_initial_round(doc, labels, oracles)?;
                    retry.round_index = prev.round_index + 1;
                    retry
                }
            }
        } else {
            run_enhanced_round(doc, labels, prev, oracles)?
        };
        converged = has_converged(&next, prev, cfg);
        history.push(next);
        if converged {
            break;
        }
    }
    Ok(PseudoExample::from_history(doc.doc_id.clone(), history, converged)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Progress {
    pub done: usize,
    pub total: usize,
    pub failed: usize,
}

pub trait ProgressSink {
    fn report(&mut self, progress: Progress);
}

impl<F: FnMut(Progress)> ProgressSink for F {
    fn report(&mut self, progress: Progress) {
        self(progress)
    }
}

/// Writes one `{"done":..,"total":..,"failed":..}` line per update.
pub struct JsonProgress<W>(pub W);

impl<W: Write> ProgressSink for JsonProgress<W> {
    fn report(&mut self, progress: Progress) {
        let line = serde_json::to_string(&progress).expect("progress serializes");
        // status output is best-effort
        let _ = writeln!(self.0, "{line}");
    }
}

/// Discards progress.
pub struct NoProgress;

impl ProgressSink for NoProgress {
    fn report(&mut self, _: Progress) {}
}

#[derive(Debug, Clone)]
pub struct GenerationOptions {
    /// Final pseudo-label file; a `.partial` sibling caches finished documents.
    pub output: Option<PathBuf>,
    pub workers: usize,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            output: None,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocumentFailure {
    pub doc_id: String,
    pub error: OracleError,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationStats {
    pub converged_frac: f64,
    pub mean_rounds: f64,
    pub failed: usize,
}

#[derive(Debug, Clone)]
pub struct GenerationReport {
    /// Successful documents, in corpus order.
    pub examples: Vec<PseudoExample>,
    pub failures: Vec<DocumentFailure>,
}

impl GenerationReport {
    pub fn stats(&self) -> GenerationStats {
        let n = self.examples.len();
        let (converged_frac, mean_rounds) = if n == 0 {
            (0.0, 0.0)
        } else {
            let converged = self.examples.iter().filter(|e| e.converged).count();
            let rounds: usize = self.examples.iter().map(|e| e.history.len()).sum();
            (converged as f64 / n as f64, rounds as f64 / n as f64)
        };
        GenerationStats {
            converged_frac,
            mean_rounds,
            failed: self.failures.len(),
        }
    }
}

pub fn cache_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".partial");
    PathBuf::from(name)
}

/// Loads finished documents from an interrupted run. A truncated final line
/// (interrupted write) is ignored; records for unknown documents are skipped.
fn load_cache(path: &Path, corpus: &Corpus) -> Result<HashMap<String, PseudoExample>> {
    let mut cached = HashMap::new();
    if !path.exists() {
        return Ok(cached);
    }
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match corpus::from_json_line(&line, i + 1, &corpus.labels) {
            Ok(example) if corpus.get(&example.doc_id).is_some() => {
                cached.insert(example.doc_id.clone(), example);
            }
            Ok(_) => {}
            Err(e) => log::warn!("ignoring unreadable cache line {}: {e}", i + 1),
        }
    }
    Ok(cached)
}

/// Labels every document in `corpus`. Per-document oracle failures are
/// collected and the document skipped; the run fails only if more than 10% of
/// documents fail.
pub fn generate_pseudo_labels(
    corpus: &Corpus,
    oracles: Oracles<'_>,
    cfg: &RoundConfig,
    options: &GenerationOptions,
    progress: &mut dyn ProgressSink,
) -> Result<GenerationReport> {
    cfg.validate()?;
    let total = corpus.len();
    let labels = &corpus.labels;

    let cache = options.output.as_deref().map(cache_path);
    let mut slots: Vec<Option<std::result::Result<PseudoExample, OracleError>>> = vec![None; total];
    if let Some(cache) = &cache {
        let mut cached = load_cache(cache, corpus)?;
        for (slot, doc) in slots.iter_mut().zip(&corpus.documents) {
            if let Some(example) = cached.remove(&doc.doc_id) {
                *slot = Some(Ok(example));
            }
        }
    }
    let pending: Vec<usize> = (0..total).filter(|&i| slots[i].is_none()).collect();
    let mut done = total - pending.len();
    let mut failed = 0;
    progress.report(Progress { done, total, failed });

    let mut writer = match &cache {
        Some(path) if !pending.is_empty() => {
            // rewrite the cache so a trailing partial line cannot corrupt appends
            let mut w = BufWriter::new(File::create(path)?);
            for example in slots.iter().flatten().flatten() {
                writeln!(w, "{}", corpus::to_json_line(example, labels)?)?;
            }
            w.flush()?;
            drop(w);
            Some(BufWriter::new(OpenOptions::new().append(true).open(path)?))
        }
        _ => None,
    };

    let workers = oracles.concurrency_limit(options.workers).min(pending.len().max(1));
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    thread::scope(|scope| -> Result<()> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, pending) = (&next, &pending);
            scope.spawn(move || loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&idx) = pending.get(k) else { break };
                let outcome = label_document(&corpus.documents[idx], labels, oracles, cfg);
                if tx.send((idx, outcome)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (idx, outcome) in rx {
            let outcome = match outcome {
                Ok(example) => {
                    if let Some(w) = writer.as_mut() {
                        writeln!(w, "{}", corpus::to_json_line(&example, labels)?)?;
                        w.flush()?;
                    }
                    Ok(example)
                }
                Err(RoundError::Oracle { doc_id, source }) => {
                    log::warn!("document {doc_id:?} skipped: {source}");
                    failed += 1;
                    Err(source)
                }
                Err(other) => return Err(other),
            };
            slots[idx] = Some(outcome);
            done += 1;
            progress.report(Progress { done, total, failed });
        }
        Ok(())
    })?;
    drop(writer);

    let mut examples = Vec::with_capacity(total);
    let mut failures = Vec::new();
    for (slot, doc) in slots.into_iter().zip(&corpus.documents) {
        match slot.expect("every document processed") {
            Ok(example) => examples.push(example),
            Err(error) => failures.push(DocumentFailure {
                doc_id: doc.doc_id.clone(),
                error,
            }),
        }
    }

    if failures.len() * 10 > total {
        return Err(RoundError::TooManyFailures {
            failed: failures.len(),
            total,
            first: format!("{}: {}", failures[0].doc_id, failures[0].error),
            all_unavailable: failures.iter().all(|f| matches!(f.error, OracleError::Unavailable(_))),
        });
    }

    if let (Some(output), Some(cache)) = (&options.output, &cache) {
        let tmp = output.with_extension("tmp");
        corpus::write_pseudo_examples(&tmp, &examples, labels)?;
        fs::rename(&tmp, output)?;
        if cache.exists() {
            fs::remove_file(cache)?;
        }
    }
    Ok(GenerationReport { examples, failures })
}
