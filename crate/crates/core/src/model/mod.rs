//! Multi-task encoder: a small post-norm transformer whose first-token output
//! feeds a class head and whose last-layer, last-head attention matrix feeds a
//! position-indexed saliency head.

mod checkpoint;
mod heads;

use std::io;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, Matrix, Var};
use crate::tokenizer::{Encoding, Vocabulary};

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, MANIFEST_FILE, PARAMS_FILE};
pub use heads::{
    classification_loss, saliency_head_grad, saliency_logits, saliency_loss, saliency_loss_grad, softmax, total_loss,
    ClassHead, LossBreakdown, PositiveWeight, SaliencyHead,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("sequence of {length} tokens exceeds L_max = {l_max}")]
    SequenceTooLong { length: usize, l_max: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token id {id} outside a vocabulary of {size}")]
    InvalidTokenId { id: u32, size: usize },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("checkpoint does not match the request: {0}")]
    ManifestMismatch(String),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[default]
    Tiny,
    Small,
    PretrainedAdapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: Preset,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub l_max: usize,
    pub n_classes: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn from_preset(preset: Preset, n_classes: usize, vocab_size: usize) -> Self {
        let (n_layers, n_heads, d_model, l_max) = match preset {
            Preset::Tiny => (2, 2, 32, 128),
            Preset::Small => (4, 4, 128, 128),
            Preset::PretrainedAdapter => (12, 12, 768, 512),
        };
        Self {
            preset,
            n_layers,
            n_heads,
            d_model,
            d_ff: 4 * d_model,
            l_max,
            n_classes,
            vocab_size,
            dropout: 0.1,
        }
    }

    pub fn with_l_max(mut self, l_max: usize) -> Self {
        self.l_max = l_max;
        self
    }

    pub fn with_dropout(mut self, dropout: f64) -> Self {
        self.dropout = dropout;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("l_max", self.l_max),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_classes < 2 {
            return Err(ModelError::InvalidConfig("at least two classes are required".into()));
        }
        if self.vocab_size == 0 {
            return Err(ModelError::InvalidConfig("empty vocabulary".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

const LAYER_TENSORS: usize = 16;
const NORM_EPS: f64 = 1e-5;
/// Standard deviation of the saliency head's initial weights.
pub const SALIENCY_WEIGHT_INIT_STD: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub wq: Matrix,
    pub bq: Matrix,
    pub wk: Matrix,
    pub bk: Matrix,
    pub wv: Matrix,
    pub bv: Matrix,
    pub wo: Matrix,
    pub bo: Matrix,
    pub norm1_gain: Matrix,
    pub norm1_bias: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub norm2_gain: Matrix,
    pub norm2_bias: Matrix,
}

impl LayerParams {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let ff = cfg.d_ff;
        Self {
            wq: xavier(rng, d, d),
            bq: Matrix::zeros(1, d),
            wk: xavier(rng, d, d),
            bk: Matrix::zeros(1, d),
            wv: xavier(rng, d, d),
            bv: Matrix::zeros(1, d),
            wo: xavier(rng, d, d),
            bo: Matrix::zeros(1, d),
            norm1_gain: Matrix::filled(1, d, 1.0),
            norm1_bias: Matrix::zeros(1, d),
            w1: xavier(rng, d, ff),
            b1: Matrix::zeros(1, ff),
            w2: xavier(rng, ff, d),
            b2: Matrix::zeros(1, d),
            norm2_gain: Matrix::filled(1, d, 1.0),
            norm2_bias: Matrix::zeros(1, d),
        }
    }

    fn tensors(&self) -> [&Matrix; LAYER_TENSORS] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.norm1_gain,
            &self.norm1_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.norm2_gain,
            &self.norm2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; LAYER_TENSORS] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.norm1_gain,
            &mut self.norm1_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.norm2_gain,
            &mut self.norm2_bias,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// `vocab × d`
    pub token_emb: Matrix,
    /// `L_max × d`
    pub pos_emb: Matrix,
    pub emb_norm_gain: Matrix,
    pub emb_norm_bias: Matrix,
    pub layers: Vec<LayerParams>,
    /// `d × n_classes`
    pub class_w: Matrix,
    /// `1 × n_classes`
    pub class_b: Matrix,
    /// `L_max × 1`
    pub sal_w: Matrix,
    /// `L_max × 1`
    pub sal_b: Matrix,
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("finite standard deviation");
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Matrix {
    normal(rng, fan_in, fan_out, (2.0 / (fan_in + fan_out) as f64).sqrt())
}

impl Params {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let token_emb = normal(&mut rng, cfg.vocab_size, d, 1.0);
        let pos_emb = normal(&mut rng, cfg.l_max, d, 0.2);
        let layers = (0..cfg.n_layers).map(|_| LayerParams::init(cfg, &mut rng)).collect();
        let class_w = xavier(&mut rng, d, cfg.n_classes);
        let sal_w = normal(&mut rng, cfg.l_max, 1, SALIENCY_WEIGHT_INIT_STD);
        Self {
            token_emb,
            pos_emb,
            emb_norm_gain: Matrix::filled(1, d, 1.0),
            emb_norm_bias: Matrix::zeros(1, d),
            layers,
            class_w,
            class_b: Matrix::zeros(1, cfg.n_classes),
            sal_w,
            sal_b: Matrix::zeros(cfg.l_max, 1),
        }
    }

    /// All tensors in a fixed order; the saliency head's weight and bias are last.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.token_emb, &self.pos_emb, &self.emb_norm_gain, &self.emb_norm_bias];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.extend([&self.class_w, &self.class_b, &self.sal_w, &self.sal_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![
            &mut self.token_emb,
            &mut self.pos_emb,
            &mut self.emb_norm_gain,
            &mut self.emb_norm_bias,
        ];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.extend([&mut self.class_w, &mut self.class_b, &mut self.sal_w, &mut self.sal_b]);
        out
    }

    pub fn saliency_head(&self) -> SaliencyHead {
        SaliencyHead {
            weight: self.sal_w.data().to_vec(),
            bias: self.sal_b.data().to_vec(),
        }
    }

    pub fn class_head(&self) -> ClassHead {
        ClassHead {
            weight: self.class_w.clone(),
            bias: self.class_b.data().to_vec(),
        }
    }

    fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let d = cfg.d_model;
        let expect = |name: &str, m: &Matrix, shape: (usize, usize)| {
            if m.shape() == shape {
                Ok(())
            } else {
                Err(ModelError::ShapeMismatch(format!(
                    "{name} is {:?}, expected {shape:?}",
                    m.shape()
                )))
            }
        };
        expect("token_emb", &self.token_emb, (cfg.vocab_size, d))?;
        expect("pos_emb", &self.pos_emb, (cfg.l_max, d))?;
        expect("class_w", &self.class_w, (d, cfg.n_classes))?;
        expect("sal_w", &self.sal_w, (cfg.l_max, 1))?;
        expect("sal_b", &self.sal_b, (cfg.l_max, 1))?;
        if self.layers.len() != cfg.n_layers {
            return Err(ModelError::ShapeMismatch(format!(
                "{} layers, expected {}",
                self.layers.len(),
                cfg.n_layers
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            expect(&format!("layer {i} wq"), &layer.wq, (d, d))?;
            expect(&format!("layer {i} w1"), &layer.w1, (d, cfg.d_ff))?;
            expect(&format!("layer {i} w2"), &layer.w2, (cfg.d_ff, d))?;
        }
        Ok(())
    }
}

/// Per-head attention matrices, `[n_layers × n_heads × L_max × L_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    n_layers: usize,
    n_heads: usize,
    heads: Vec<Matrix>,
}

impl AttentionTensor {
    pub fn zeros(n_layers: usize, n_heads: usize, l_max: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            heads: vec![Matrix::zeros(l_max, l_max); n_layers * n_heads],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        let l = self.heads.first().map_or(0, Matrix::rows);
        [self.n_layers, self.n_heads, l, l]
    }

    pub fn head(&self, layer: usize, head: usize) -> &Matrix {
        &self.heads[layer * self.n_heads + head]
    }

    pub fn head_mut(&mut self, layer: usize, head: usize) -> &mut Matrix {
        &mut self.heads[layer * self.n_heads + head]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `L_max × d`; pad rows are zero.
    pub token_reprs: Matrix,
    pub attention: AttentionTensor,
    pub pooled: Vec<f64>,
    /// `true` for real tokens.
    pub pad_mask: Vec<bool>,
}

impl EncoderOutput {
    pub fn real_len(&self) -> usize {
        self.pad_mask.iter().filter(|&&m| m).count()
    }
}

/// The last layer's last head, unmodified.
pub fn extract_attention_matrix(out: &EncoderOutput) -> Matrix {
    let [layers, heads, _, _] = out.attention.shape();
    out.attention.head(layers - 1, heads - 1).clone()
}

/// Graph handles produced by one forward pass.
pub struct Forward {
    /// One leaf per tensor, in [`Params::tensors`] order.
    pub params: Vec<Var>,
    /// Gathered token embeddings before positions are added (`n × d`).
    pub token_embeddings: Var,
    pub hidden: Var,
    /// `n × n` matrices in layer-major order.
    pub attention: Vec<Var>,
    pub pooled: Var,
    /// `1 × n_classes`
    pub class_logits: Var,
    /// `n × 1`
    pub saliency_logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: Params,
}

fn dropout_mask(rng: &mut dyn RngCore, len: usize, p: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        if config.preset == Preset::PretrainedAdapter {
            return Err(ModelError::Unsupported(
                "the pretrained-adapter preset needs external encoder weights, which are not bundled".into(),
            ));
        }
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(ModelError::InvalidConfig(format!(
                "vocabulary has {} entries, config says {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let params = Params::init(&config, seed);
        Ok(Self { config, vocab, params })
    }

    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, params: Params) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(ModelError::ShapeMismatch("vocabulary size differs from config".into()));
        }
        params.check_shapes(&config)?;
        Ok(Self { config, vocab, params })
    }

    pub fn tokenize(&self, text: &str) -> Encoding {
        self.vocab.encode(text, self.config.l_max)
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            Some(&id) => Err(ModelError::InvalidTokenId {
                id,
                size: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Builds the forward pass for `1 ≤ ids.len() ≤ L_max` real tokens. Passing an
    /// RNG enables dropout.
    pub fn forward<'p>(&'p self, g: &mut Graph<'p>, ids: &[u32], mut rng: Option<&mut dyn RngCore>) -> Forward {
        let cfg = &self.config;
        let n = ids.len();
        assert!(n >= 1 && n <= cfg.l_max, "forward needs 1..=L_max tokens, got {n}");
        let params: Vec<Var> = self.params.tensors().into_iter().map(|t| g.param(t)).collect();
        let p = |i: usize| params[i];

        let mut drop = |g: &mut Graph<'p>, x: Var| match rng.as_deref_mut() {
            Some(r) if cfg.dropout > 0.0 => {
                let len = g.value(x).data().len();
                g.dropout(x, dropout_mask(r, len, cfg.dropout))
            }
            _ => x,
        };
        let norm = |g: &mut Graph<'p>, x: Var, gain: Var, bias: Var| {
            let z = g.normalize_rows(x, NORM_EPS);
            let z = g.mul_row(z, gain);
            g.add_row(z, bias)
        };
        let affine = |g: &mut Graph<'p>, x: Var, w: Var, b: Var| {
            let y = g.matmul(x, w);
            g.add_row(y, b)
        };

        let ids_usize: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let token_embeddings = g.gather(p(0), &ids_usize);
        let positions = g.slice_rows(p(1), 0, n);
        let x = g.add(token_embeddings, positions);
        let x = norm(g, x, p(2), p(3));
        let mut x = drop(g, x);

        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attention = Vec::with_capacity(cfg.n_layers * cfg.n_heads);
        for layer in 0..cfg.n_layers {
            let base = 4 + layer * LAYER_TENSORS;
            let q = affine(g, x, p(base), p(base + 1));
            let k = affine(g, x, p(base + 2), p(base + 3));
            let v = affine(g, x, p(base + 4), p(base + 5));
            let mut contexts = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let qh = g.slice_cols(q, h * dh, dh);
                let kh = g.slice_cols(k, h * dh, dh);
                let vh = g.slice_cols(v, h * dh, dh);
                let scores = g.matmul_bt(qh, kh);
                let scores = g.scale(scores, scale);
                let a = g.softmax_rows(scores);
                attention.push(a);
                contexts.push(g.matmul(a, vh));
            }
            let ctx = g.concat_cols(&contexts);
            let o = affine(g, ctx, p(base + 6), p(base + 7));
            let o = drop(g, o);
            let r = g.add(x, o);
            x = norm(g, r, p(base + 8), p(base + 9));
            let f = affine(g, x, p(base + 10), p(base + 11));
            let f = g.gelu(f);
            let f = affine(g, f, p(base + 12), p(base + 13));
            let f = drop(g, f);
            let r = g.add(x, f);
            x = norm(g, r, p(base + 14), p(base + 15));
        }

        let head_base = 4 + cfg.n_layers * LAYER_TENSORS;
        let pooled = g.slice_rows(x, 0, 1);
        let pooled_in = drop(g, pooled);
        let class_logits = affine(g, pooled_in, p(head_base), p(head_base + 1));

        let last = *attention.last().expect("at least one head");
        let w = g.slice_rows(p(head_base + 2), 0, n);
        let b = g.slice_rows(p(head_base + 3), 0, n);
        let aw = g.matmul(last, w);
        let saliency_logits = g.add(aw, b);

        Forward {
            params,
            token_embeddings,
            hidden: x,
            attention,
            pooled,
            class_logits,
            saliency_logits,
        }
    }

    /// Runs the encoder without dropout, padding or truncating to `L_max`.
    pub fn encode(&self, ids: &[u32]) -> Result<EncoderOutput> {
        let keep = ids.len().min(self.config.l_max);
        self.encode_padded(&ids[..keep])
    }

    /// Like [`Model::encode`] but rejects inputs longer than `L_max`.
    pub fn encode_strict(&self, ids: &[u32]) -> Result<EncoderOutput> {
        if ids.len() > self.config.l_max {
            return Err(ModelError::SequenceTooLong {
                length: ids.len(),
                l_max: self.config.l_max,
            });
        }
        self.encode_padded(ids)
    }

    fn encode_padded(&self, ids: &[u32]) -> Result<EncoderOutput> {
        self.check_ids(ids)?;
        let cfg = &self.config;
        let l = cfg.l_max;
        let n = ids.len();
        let mut out = EncoderOutput {
            token_reprs: Matrix::zeros(l, cfg.d_model),
            attention: AttentionTensor::zeros(cfg.n_layers, cfg.n_heads, l),
            pooled: vec![0.0; cfg.d_model],
            pad_mask: (0..l).map(|i| i < n).collect(),
        };
        if n == 0 {
            return Ok(out);
        }
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, ids, None);
        let hidden = g.value(fwd.hidden);
        for i in 0..n {
            out.token_reprs.row_mut(i).copy_from_slice(hidden.row(i));
        }
        out.pooled.copy_from_slice(g.value(fwd.pooled).row(0));
        for (k, &a) in fwd.attention.iter().enumerate() {
            let src = g.value(a);
            let dst = out.attention.head_mut(k / cfg.n_heads, k % cfg.n_heads);
            for i in 0..n {
                dst.row_mut(i)[..n].copy_from_slice(src.row(i));
            }
        }
        Ok(out)
    }

    /// Class probabilities and per-real-token saliency scores `σ(ŷ)`.
    pub fn infer(&self, ids: &[u32]) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.encode(ids)?;
        let n = out.real_len();
        let probs = softmax(&self.params.class_head().logits(&out.pooled));
        if n == 0 {
            return Ok((probs, Vec::new()));
        }
        let logits = saliency_logits(&extract_attention_matrix(&out), &self.params.saliency_head())?;
        let scores = logits[..n].iter().map(|&z| crate::graph::sigmoid(z)).collect();
        Ok((probs, scores))
    }
}
