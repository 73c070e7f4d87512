//! Minibatch training of the multi-task model on pseudo-labelled examples.

mod adam;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::Adam;

use crate::corpus::{Corpus, Document, LabelSet, PseudoExample, SaliencyMask};
use crate::eval::{micro_f1, ConfusionCounts};
use crate::graph::{Graph, Matrix};
use crate::model::{
    load_checkpoint, save_checkpoint, Manifest, Model, ModelConfig, ModelError, PositiveWeight, Preset,
};
use crate::oracles::align_words_with_stats;
use crate::tokenizer::{Vocabulary, WordTokenizer, PAD_ID};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training examples")]
    EmptyTrainingSet,
    #[error("empty batch")]
    EmptyBatch,
    #[error("total loss is not finite at epoch {epoch}, step {step}")]
    DivergenceDetected { epoch: usize, step: usize },
    #[error("cannot align the saliency mask of {0} to the model tokenization")]
    AlignmentFailure(String),
    #[error("pseudo-labelled document {0} is not in the corpus")]
    MissingDocument(String),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

pub fn default_learning_rate(preset: Preset) -> f64 {
    match preset {
        Preset::PretrainedAdapter => 2e-5,
        Preset::Tiny | Preset::Small => 1e-3,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    /// Falls back to [`default_learning_rate`] for the preset.
    pub learning_rate: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub filter_unconverged: bool,
    pub positive_weight: PositiveWeight,
    pub max_vocab: usize,
    pub min_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.7,
            learning_rate: None,
            epochs: 3,
            batch_size: 16,
            seed: 0,
            filter_unconverged: false,
            positive_weight: PositiveWeight::Balanced,
            max_vocab: 20_000,
            min_count: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(TrainError::InvalidConfig(msg));
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(1..=3).contains(&self.epochs) {
            return fail(format!("epochs must be 1, 2 or 3, got {}", self.epochs));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if let Some(lr) = self.learning_rate {
            if !(lr.is_finite() && lr > 0.0) {
                return fail(format!("learning_rate {lr} must be positive"));
            }
        }
        if self.max_vocab < 5 {
            return fail("max_vocab must leave room for special tokens".into());
        }
        Ok(())
    }

    pub fn learning_rate_for(&self, preset: Preset) -> f64 {
        self.learning_rate.unwrap_or_else(|| default_learning_rate(preset))
    }
}

/// Rectangular training tensors; every per-document vector has length `L_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub doc_ids: Vec<String>,
    pub token_ids: Vec<Vec<u32>>,
    pub class_targets: Vec<usize>,
    pub saliency_targets: Vec<Vec<f64>>,
    pub pad_masks: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn real_len(&self, i: usize) -> usize {
        self.pad_masks[i].iter().filter(|&&m| m).count()
    }

    /// (salient, non-salient) counts over real tokens.
    pub fn saliency_counts(&self) -> (usize, usize) {
        let mut salient = 0;
        let mut total = 0;
        for (targets, mask) in self.saliency_targets.iter().zip(&self.pad_masks) {
            for (y, &real) in targets.iter().zip(mask) {
                if real {
                    total += 1;
                    salient += (*y > 0.5) as usize;
                }
            }
        }
        (salient, total - salient)
    }
}

/// The example's mask over the full (untruncated) model tokenization of
/// `doc`, re-aligned from its salient words when the stored length differs.
fn aligned_mask(doc: &Document, example: &PseudoExample, full_length: usize) -> Result<SaliencyMask> {
    if example.final_mask.len() == full_length {
        return Ok(example.final_mask.clone());
    }
    let words = example
        .history
        .last()
        .map(|r| r.salient_words.as_slice())
        .unwrap_or_default();
    let spans = WordTokenizer.token_spans(&doc.text);
    match align_words_with_stats(words, full_length, &spans, &doc.text) {
        Ok((mask, stats)) if stats.dropped_words == 0 => Ok(mask),
        _ => Err(TrainError::AlignmentFailure(example.doc_id.clone())),
    }
}

pub fn collate(items: &[(&Document, &PseudoExample)], vocab: &Vocabulary, l_max: usize) -> Result<Batch> {
    if items.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut batch = Batch {
        doc_ids: Vec::with_capacity(items.len()),
        token_ids: Vec::with_capacity(items.len()),
        class_targets: Vec::with_capacity(items.len()),
        saliency_targets: Vec::with_capacity(items.len()),
        pad_masks: Vec::with_capacity(items.len()),
    };
    for (doc, example) in items {
        if doc.doc_id != example.doc_id {
            return Err(TrainError::AlignmentFailure(example.doc_id.clone()));
        }
        let encoding = vocab.encode(&doc.text, l_max);
        let mask = aligned_mask(doc, example, encoding.full_length)?;
        let n = encoding.ids.len();
        let mut ids = encoding.ids;
        ids.resize(l_max, PAD_ID);
        batch.doc_ids.push(doc.doc_id.clone());
        batch.token_ids.push(ids);
        batch.class_targets.push(example.final_label);
        batch.saliency_targets.push(
            (0..l_max)
                .map(|i| if i < n && mask.contains(i) { 1.0 } else { 0.0 })
                .collect(),
        );
        batch.pad_masks.push((0..l_max).map(|i| i < n).collect());
    }
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub l_c: f64,
    pub l_e: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_c: f64,
    pub l_e: f64,
    pub total: f64,
    pub examples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_micro_f1: Option<f64>,
}

#[derive(Debug, Default, Clone, Copy)]
pub struct TrainOptions<'a> {
    /// Checkpoints and logs are written here when set.
    pub out_dir: Option<&'a Path>,
    /// Gold-labelled development corpus used for model selection.
    pub dev: Option<&'a Corpus>,
}

pub const STEP_LOG_FILE: &str = "train_log.jsonl";
pub const EPOCH_LOG_FILE: &str = "epochs.jsonl";
pub const MODEL_DIR: &str = "model";

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// The selected model: best dev micro-F1 if a dev corpus was given, else the last epoch.
    pub model: Model,
    pub manifest: Manifest,
    pub selected_epoch: usize,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub examples: usize,
    /// Directory holding the selected checkpoint, when written.
    pub checkpoint: Option<PathBuf>,
}

/// Per-document loss parts and parameter gradients for one forward/backward pass.
fn document_step(
    model: &Model,
    batch: &Batch,
    i: usize,
    lambda: f64,
    positive_weight: f64,
    rng: &mut ChaCha8Rng,
    grads: &mut [Matrix],
) -> (f64, f64) {
    let n = batch.real_len(i);
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, &batch.token_ids[i][..n], Some(rng));
    let lc = g.cross_entropy(fwd.class_logits, batch.class_targets[i]);
    let le = g.weighted_bce(fwd.saliency_logits, &batch.saliency_targets[i][..n], positive_weight);
    let (lc_value, le_value) = (g.value(lc).scalar(), g.value(le).scalar());
    let total = if lambda > 0.0 {
        let scaled = g.scale(le, lambda);
        g.add(lc, scaled)
    } else {
        lc
    };
    let mut result = g.backward(total);
    for (acc, &var) in grads.iter_mut().zip(&fwd.params) {
        if let Some(grad) = result.take(var) {
            acc.add_assign(&grad);
        }
    }
    (lc_value, le_value)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Micro-F1 of `model` on a gold-labelled corpus.
pub fn dev_micro_f1(model: &Model, corpus: &Corpus) -> Result<f64> {
    let mut counts = ConfusionCounts::new(model.config.n_classes);
    for doc in &corpus.documents {
        if let Some(gold) = doc.gold_label {
            let (probs, _) = model.infer(&model.tokenize(&doc.text).ids)?;
            counts.record(gold, argmax(&probs));
        }
    }
    Ok(micro_f1(&counts))
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Trains a fresh model. `model_cfg.n_classes` and `model_cfg.vocab_size` are
/// replaced by the label-set size and the size of the vocabulary built from
/// the training documents.
pub fn train(
    pseudo: &[PseudoExample],
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    options: TrainOptions<'_>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let examples: Vec<&PseudoExample> = pseudo
        .iter()
        .filter(|ex| !cfg.filter_unconverged || ex.converged)
        .collect();
    if examples.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let docs: Vec<&Document> = examples
        .iter()
        .map(|ex| {
            corpus
                .get(&ex.doc_id)
                .ok_or_else(|| TrainError::MissingDocument(ex.doc_id.clone()))
        })
        .collect::<Result<_>>()?;

    let vocab = Vocabulary::build(docs.iter().map(|d| d.text.as_str()), cfg.max_vocab, cfg.min_count);
    let mut model_cfg = model_cfg.clone();
    model_cfg.n_classes = corpus.labels.len();
    model_cfg.vocab_size = vocab.len();
    let l_max = model_cfg.l_max;
    let mut model = Model::new(model_cfg.clone(), vocab, cfg.seed)?;
    let manifest = Manifest {
        model_config: model_cfg.clone(),
        label_set: corpus.labels.names().to_vec(),
        l_max,
        lambda: cfg.lambda,
        w_policy: cfg.positive_weight,
        seed: cfg.seed,
    };

    let items: Vec<(&Document, &PseudoExample)> = docs.iter().copied().zip(examples.iter().copied()).collect();
    // collate once up front so alignment problems surface before any update
    for chunk in items.chunks(cfg.batch_size) {
        collate(chunk, &model.vocab, l_max)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = Adam::new(cfg.learning_rate_for(model_cfg.preset), &model.params.tensors());
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_c, mut sum_e) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch_items: Vec<_> = chunk.iter().map(|&k| items[k]).collect();
            let batch = collate(&batch_items, &model.vocab, l_max)?;
            let (salient, non_salient) = batch.saliency_counts();
            let w = cfg.positive_weight.resolve(salient, non_salient);
            let mut grads: Vec<Matrix> = model
                .params
                .tensors()
                .iter()
                .map(|t| Matrix::zeros(t.rows(), t.cols()))
                .collect();
            let (mut batch_c, mut batch_e) = (0.0, 0.0);
            for i in 0..batch.len() {
                let (lc, le) = document_step(&model, &batch, i, cfg.lambda, w, &mut rng, &mut grads);
                batch_c += lc;
                batch_e += le;
            }
            let size = batch.len() as f64;
            let (l_c, l_e) = (batch_c / size, batch_e / size);
            let total = l_c + cfg.lambda * l_e;
            if !total.is_finite() {
                return Err(TrainError::DivergenceDetected { epoch, step });
            }
            for grad in &mut grads {
                grad.data_mut().iter_mut().for_each(|v| *v /= size);
            }
            optimizer.step(&mut model.params.tensors_mut(), &grads);
            sum_c += batch_c;
            sum_e += batch_e;
            steps.push(StepLog {
                epoch,
                step,
                l_c,
                l_e,
                total,
            });
        }
        let count = items.len() as f64;
        let dev_score = match options.dev {
            Some(dev) if dev.has_gold_labels() => Some(dev_micro_f1(&model, dev)?),
            _ => None,
        };
        let summary = EpochLog {
            epoch,
            l_c: sum_c / count,
            l_e: sum_e / count,
            total: sum_c / count + cfg.lambda * sum_e / count,
            examples: items.len(),
            dev_micro_f1: dev_score,
        };
        log::info!(
            "epoch {epoch}: l_c {:.4} l_e {:.4} total {:.4}{}",
            summary.l_c,
            summary.l_e,
            summary.total,
            dev_score.map(|s| format!(" dev micro-F1 {s:.4}")).unwrap_or_default()
        );
        epochs.push(summary);
        if let Some(dir) = options.out_dir {
            save_checkpoint(dir.join(format!("epoch-{epoch}")), &model, &manifest)?;
        }
        let score = dev_score.unwrap_or(f64::NEG_INFINITY);
        let replace = match &best {
            None => true,
            Some((best_score, _, _)) => dev_score.is_none() || score > *best_score,
        };
        if replace {
            best = Some((score, epoch, model.clone()));
        }
    }

    let (_, selected_epoch, selected) = best.expect("at least one epoch");
    let checkpoint = match options.out_dir {
        Some(dir) => {
            let target = dir.join(MODEL_DIR);
            save_checkpoint(&target, &selected, &manifest)?;
            write_jsonl(&dir.join(STEP_LOG_FILE), &steps)?;
            write_jsonl(&dir.join(EPOCH_LOG_FILE), &epochs)?;
            Some(target)
        }
        None => None,
    };
    Ok(TrainOutput {
        model: selected,
        manifest,
        selected_epoch,
        steps,
        epochs,
        examples: items.len(),
        checkpoint,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub doc_id: String,
    pub label: usize,
    pub probabilities: Vec<f64>,
    pub tokens: Vec<String>,
    /// `σ(ŷ)` for each real token; pads get no score.
    pub saliency: Vec<f64>,
}

pub fn predict(model: &Model, manifest: &Manifest, labels: &LabelSet, docs: &[Document]) -> Result<Vec<Prediction>> {
    manifest.check_labels(labels)?;
    docs.iter()
        .map(|doc| {
            let encoding = model.tokenize(&doc.text);
            let (probabilities, saliency) = model.infer(&encoding.ids)?;
            Ok(Prediction {
                doc_id: doc.doc_id.clone(),
                label: argmax(&probabilities),
                probabilities,
                tokens: encoding.tokens,
                saliency,
            })
        })
        .collect()
}

pub fn predict_from_checkpoint(dir: impl AsRef<Path>, labels: &LabelSet, docs: &[Document]) -> Result<Vec<Prediction>> {
    let (model, manifest) = load_checkpoint(dir)?;
    predict(&model, &manifest, labels, docs)
}
