//! Per-token attributions: the model's own saliency head plus gradient,
//! input-times-gradient and occlusion explainers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::graph::{Graph, Matrix};
use crate::model::Model;
use crate::tokenizer::MASK_ID;
use crate::train::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMethod {
    ModelSaliencyHead,
    GradientSaliency,
    InputXGradient,
    Occlusion,
}

impl AttributionMethod {
    pub const ALL: [AttributionMethod; 4] = [
        AttributionMethod::ModelSaliencyHead,
        AttributionMethod::GradientSaliency,
        AttributionMethod::InputXGradient,
        AttributionMethod::Occlusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttributionMethod::ModelSaliencyHead => "model_saliency_head",
            AttributionMethod::GradientSaliency => "gradient_saliency",
            AttributionMethod::InputXGradient => "input_x_gradient",
            AttributionMethod::Occlusion => "occlusion",
        }
    }
}

impl fmt::Display for AttributionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttributionMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown attribution method {s:?}"))
    }
}

/// One score per real token, `[CLS]` included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAttribution {
    pub doc_id: String,
    pub method: AttributionMethod,
    pub scores: Vec<f64>,
}

/// A classifier the post-hoc explainers can probe.
pub trait Attributable {
    fn class_probabilities(&self, ids: &[u32]) -> Result<Vec<f64>>;

    /// Token embeddings (`n × d`) and the gradient of `class`'s logit with
    /// respect to them.
    fn embedding_gradient(&self, ids: &[u32], class: usize) -> Result<(Matrix, Matrix)>;

    /// Replacement id used by occlusion.
    fn mask_id(&self) -> u32 {
        MASK_ID
    }
}

impl Attributable for Model {
    fn class_probabilities(&self, ids: &[u32]) -> Result<Vec<f64>> {
        Ok(self.infer(ids)?.0)
    }

    fn embedding_gradient(&self, ids: &[u32], class: usize) -> Result<(Matrix, Matrix)> {
        let ids = &ids[..ids.len().min(self.config.l_max)];
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, ids, None);
        let logit = g.pick(fwd.class_logits, 0, class);
        let grads = g.backward(logit);
        let embeddings = g.value(fwd.token_embeddings).clone();
        let grad = grads
            .get(fwd.token_embeddings)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(embeddings.rows(), embeddings.cols()));
        Ok((embeddings, grad))
    }
}

fn predicted_class(model: &impl Attributable, ids: &[u32]) -> Result<usize> {
    Ok(argmax(&model.class_probabilities(ids)?))
}

/// L2 norm of the predicted-class logit's gradient per token embedding.
pub fn gradient_saliency(model: &impl Attributable, doc_id: &str, ids: &[u32]) -> Result<TokenAttribution> {
    let class = predicted_class(model, ids)?;
    let (_, grad) = model.embedding_gradient(ids, class)?;
    let scores = (0..grad.rows())
        .map(|i| grad.row(i).iter().map(|g| g * g).sum::<f64>().sqrt())
        .collect();
    Ok(TokenAttribution {
        doc_id: doc_id.to_owned(),
        method: AttributionMethod::GradientSaliency,
        scores,
    })
}

/// Sum over embedding dimensions of embedding ⊙ gradient; signed.
pub fn input_x_gradient(model: &impl Attributable, doc_id: &str, ids: &[u32]) -> Result<TokenAttribution> {
    let class = predicted_class(model, ids)?;
    let (emb, grad) = model.embedding_gradient(ids, class)?;
    let scores = (0..grad.rows())
        .map(|i| emb.row(i).iter().zip(grad.row(i)).map(|(x, g)| x * g).sum())
        .collect();
    Ok(TokenAttribution {
        doc_id: doc_id.to_owned(),
        method: AttributionMethod::InputXGradient,
        scores,
    })
}

/// Drop in `class` probability when the token at `position` is replaced by
/// the mask symbol. Only real positions may be occluded.
pub fn occlusion_score(model: &impl Attributable, ids: &[u32], position: usize, class: usize) -> Result<f64> {
    if position >= ids.len() {
        return Err(EvalError::NotARealToken {
            position,
            length: ids.len(),
        });
    }
    let full = model.class_probabilities(ids)?[class];
    let mut occluded = ids.to_vec();
    occluded[position] = model.mask_id();
    Ok(full - model.class_probabilities(&occluded)?[class])
}

pub fn occlusion(model: &impl Attributable, doc_id: &str, ids: &[u32]) -> Result<TokenAttribution> {
    let full = model.class_probabilities(ids)?;
    let class = argmax(&full);
    let mut occluded = ids.to_vec();
    let mut scores = Vec::with_capacity(ids.len());
    for i in 0..ids.len() {
        occluded[i] = model.mask_id();
        scores.push(full[class] - model.class_probabilities(&occluded)?[class]);
        occluded[i] = ids[i];
    }
    Ok(TokenAttribution {
        doc_id: doc_id.to_owned(),
        method: AttributionMethod::Occlusion,
        scores,
    })
}

/// `σ(ŷ)` from the model's saliency head.
pub fn model_saliency(model: &Model, doc_id: &str, ids: &[u32]) -> Result<TokenAttribution> {
    Ok(TokenAttribution {
        doc_id: doc_id.to_owned(),
        method: AttributionMethod::ModelSaliencyHead,
        scores: model.infer(ids)?.1,
    })
}

pub fn attribute(model: &Model, doc_id: &str, ids: &[u32], method: AttributionMethod) -> Result<TokenAttribution> {
    let ids = &ids[..ids.len().min(model.config.l_max)];
    match method {
        AttributionMethod::ModelSaliencyHead => model_saliency(model, doc_id, ids),
        AttributionMethod::GradientSaliency => gradient_saliency(model, doc_id, ids),
        AttributionMethod::InputXGradient => input_x_gradient(model, doc_id, ids),
        AttributionMethod::Occlusion => occlusion(model, doc_id, ids),
    }
}
