//! Classification metrics, agreement with human rationales, and the report
//! that ties them to a trained checkpoint.

mod explain;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use explain::{
    attribute, gradient_saliency, input_x_gradient, model_saliency, occlusion, occlusion_score, Attributable,
    AttributionMethod, TokenAttribution,
};

use crate::corpus::{Corpus, Document, SaliencyMask};
use crate::model::{Manifest, Model, ModelError};
use crate::tokenizer::Encoding;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("corpus has no gold labels")]
    NoGoldLabels,
    #[error("document {0} has no gold rationale")]
    NoGoldRationale(String),
    #[error("position {position} is not a real token (length {length})")]
    NotARealToken { position: usize, length: usize },
    #[error("counts must have one entry per class")]
    InvalidCounts,
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Per-class true positives, false positives and false negatives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    tp: Vec<u64>,
    fp: Vec<u64>,
    #[serde(rename = "fn")]
    fn_: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(n_classes: usize) -> Self {
        Self {
            tp: vec![0; n_classes],
            fp: vec![0; n_classes],
            fn_: vec![0; n_classes],
        }
    }

    pub fn from_counts(tp: Vec<u64>, fp: Vec<u64>, fn_: Vec<u64>) -> Result<Self> {
        if tp.len() != fp.len() || tp.len() != fn_.len() {
            return Err(EvalError::InvalidCounts);
        }
        Ok(Self { tp, fp, fn_ })
    }

    /// Counts for single-label predictions.
    pub fn from_pairs(n_classes: usize, gold: &[usize], pred: &[usize]) -> Self {
        assert_eq!(gold.len(), pred.len(), "one prediction per gold label");
        let mut counts = Self::new(n_classes);
        for (&g, &p) in gold.iter().zip(pred) {
            counts.record(g, p);
        }
        counts
    }

    pub fn record(&mut self, gold: usize, pred: usize) {
        if gold == pred {
            self.tp[gold] += 1;
        } else {
            self.fp[pred] += 1;
            self.fn_[gold] += 1;
        }
    }

    pub fn n_classes(&self) -> usize {
        self.tp.len()
    }

    pub fn tp(&self) -> &[u64] {
        &self.tp
    }

    pub fn fp(&self) -> &[u64] {
        &self.fp
    }

    pub fn fn_(&self) -> &[u64] {
        &self.fn_
    }

    pub fn total_predictions(&self) -> u64 {
        self.tp.iter().sum::<u64>() + self.fp.iter().sum::<u64>()
    }

    pub fn total_gold(&self) -> u64 {
        self.tp.iter().sum::<u64>() + self.fn_.iter().sum::<u64>()
    }
}

fn f1_from(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// `2·ΣTP / (2·ΣTP + ΣFP + ΣFN)`; 0 when all counts are zero.
pub fn micro_f1(counts: &ConfusionCounts) -> f64 {
    let tp = counts.tp.iter().sum();
    let fp = counts.fp.iter().sum();
    let fn_ = counts.fn_.iter().sum();
    f1_from(tp, fp, fn_)
}

/// Per-class `2TP / (2TP + FP + FN)`, 0 for a zero denominator.
pub fn per_class_f1(counts: &ConfusionCounts) -> Vec<f64> {
    (0..counts.n_classes())
        .map(|i| f1_from(counts.tp[i], counts.fp[i], counts.fn_[i]))
        .collect()
}

/// Unweighted mean of the per-class F1 scores.
pub fn macro_f1(counts: &ConfusionCounts) -> f64 {
    let scores = per_class_f1(counts);
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// How a predicted salient set is read off a score vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    /// Scores at or above the threshold.
    Threshold(f64),
    /// The `k` highest scores; ties go to the earlier position.
    TopK(usize),
}

pub fn select_salient(scores: &[f64], selection: Selection) -> BTreeSet<usize> {
    match selection {
        Selection::Threshold(tau) => (0..scores.len()).filter(|&i| scores[i] >= tau).collect(),
        Selection::TopK(k) => {
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            order.into_iter().take(k).collect()
        }
    }
}

/// Set precision, recall and F1. Two empty sets agree perfectly.
pub fn set_agreement(predicted: &BTreeSet<usize>, gold: &BTreeSet<usize>) -> Agreement {
    if predicted.is_empty() && gold.is_empty() {
        return Agreement {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let hit = predicted.intersection(gold).count() as f64;
    let precision = if predicted.is_empty() {
        0.0
    } else {
        hit / predicted.len() as f64
    };
    let recall = if gold.is_empty() { 0.0 } else { hit / gold.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Agreement { precision, recall, f1 }
}

pub fn saliency_agreement(attribution: &TokenAttribution, gold: &SaliencyMask, selection: Selection) -> Agreement {
    let gold: BTreeSet<usize> = gold.indices().filter(|&i| i < attribution.scores.len()).collect();
    set_agreement(&select_salient(&attribution.scores, selection), &gold)
}

/// Tokens of `encoding` overlapping the document's rationale spans.
pub fn rationale_mask(doc: &Document, encoding: &Encoding) -> Result<SaliencyMask> {
    let spans = doc
        .gold_rationale
        .as_ref()
        .ok_or_else(|| EvalError::NoGoldRationale(doc.doc_id.clone()))?;
    let indices = encoding
        .spans
        .iter()
        .enumerate()
        .filter(|(_, t)| spans.iter().any(|s| s.overlaps(t)))
        .map(|(i, _)| i);
    Ok(SaliencyMask::new(encoding.spans.len(), indices).expect("indices from enumerate"))
}

/// Threshold on `σ(ŷ)` for the model's own saliency head.
pub const NATIVE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub label: String,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyReport {
    pub method: AttributionMethod,
    pub documents: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub documents: usize,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassReport>,
    /// One entry per attribution method, over documents with rationales.
    pub saliency_agreement: Vec<SaliencyReport>,
}

impl MetricsReport {
    pub fn agreement(&self, method: AttributionMethod) -> Option<&SaliencyReport> {
        self.saliency_agreement.iter().find(|r| r.method == method)
    }

    /// Plain-text table for terminals.
    pub fn table(&self) -> String {
        let mut out = format!(
            "documents  {}\nmicro-F1   {:.4}\nmacro-F1   {:.4}\n\n{:<16} {:>8} {:>6} {:>6} {:>6}\n",
            self.documents, self.micro_f1, self.macro_f1, "class", "F1", "TP", "FP", "FN"
        );
        for c in &self.per_class {
            out.push_str(&format!(
                "{:<16} {:>8.4} {:>6} {:>6} {:>6}\n",
                c.label, c.f1, c.tp, c.fp, c.fn_
            ));
        }
        if !self.saliency_agreement.is_empty() {
            out.push_str(&format!(
                "\n{:<22} {:>6} {:>9} {:>9} {:>9}\n",
                "saliency", "docs", "precision", "recall", "F1"
            ));
            for s in &self.saliency_agreement {
                out.push_str(&format!(
                    "{:<22} {:>6} {:>9.4} {:>9.4} {:>9.4}\n",
                    s.method.name(),
                    s.documents,
                    s.precision,
                    s.recall,
                    s.f1
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Post-hoc explainers to score against rationales besides the native head.
    pub explainers: Vec<AttributionMethod>,
}

/// Output of [`evaluate`]: the report plus every attribution computed.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub attributions: Vec<TokenAttribution>,
}

/// Scores a checkpoint on a gold-labelled corpus. The native head is scored
/// with threshold [`NATIVE_THRESHOLD`], post-hoc explainers with top-k where k
/// is the rationale size.
pub fn evaluate(model: &Model, manifest: &Manifest, corpus: &Corpus, options: &EvalOptions) -> Result<Evaluation> {
    manifest.check_labels(&corpus.labels)?;
    if corpus.is_empty() || !corpus.has_gold_labels() {
        return Err(EvalError::NoGoldLabels);
    }
    let mut methods = vec![AttributionMethod::ModelSaliencyHead];
    methods.extend(
        options
            .explainers
            .iter()
            .copied()
            .filter(|m| *m != AttributionMethod::ModelSaliencyHead),
    );

    let mut counts = ConfusionCounts::new(corpus.labels.len());
    let mut sums = vec![(0usize, 0.0, 0.0, 0.0); methods.len()];
    let mut attributions = Vec::new();
    for doc in &corpus.documents {
        let gold = doc.gold_label.ok_or(EvalError::NoGoldLabels)?;
        let encoding = model.tokenize(&doc.text);
        let (probs, _) = model.infer(&encoding.ids)?;
        counts.record(gold, crate::train::argmax(&probs));
        let rationale = doc
            .gold_rationale
            .as_ref()
            .map(|_| rationale_mask(doc, &encoding))
            .transpose()?;
        for (k, &method) in methods.iter().enumerate() {
            let attribution = attribute(model, &doc.doc_id, &encoding.ids, method)?;
            if let Some(gold_mask) = &rationale {
                let selection = match method {
                    AttributionMethod::ModelSaliencyHead => Selection::Threshold(NATIVE_THRESHOLD),
                    _ => Selection::TopK(gold_mask.salient_count()),
                };
                let a = saliency_agreement(&attribution, gold_mask, selection);
                let s = &mut sums[k];
                s.0 += 1;
                s.1 += a.precision;
                s.2 += a.recall;
                s.3 += a.f1;
            }
            attributions.push(attribution);
        }
    }

    let per_class = per_class_f1(&counts)
        .into_iter()
        .enumerate()
        .map(|(i, f1)| ClassReport {
            label: corpus.labels.names()[i].clone(),
            f1,
            tp: counts.tp[i],
            fp: counts.fp[i],
            fn_: counts.fn_[i],
        })
        .collect();
    let saliency_agreement = methods
        .iter()
        .zip(&sums)
        .filter(|(_, s)| s.0 > 0)
        .map(|(&method, &(n, p, r, f))| SaliencyReport {
            method,
            documents: n,
            precision: p / n as f64,
            recall: r / n as f64,
            f1: f / n as f64,
        })
        .collect();
    Ok(Evaluation {
        report: MetricsReport {
            documents: corpus.len(),
            micro_f1: micro_f1(&counts),
            macro_f1: macro_f1(&counts),
            per_class,
            saliency_agreement,
        },
        attributions,
    })
}

#[cfg(test)]
mod tests;
