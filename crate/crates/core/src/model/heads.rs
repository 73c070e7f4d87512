//! Output heads and losses on plain vectors, independent of the autodiff tape.

use serde::{Deserialize, Serialize};

use super::{ModelError, Result};
use crate::corpus::SaliencyMask;
use crate::graph::{sigmoid, softplus, Matrix, LOGIT_CLAMP};

/// Position-indexed linear map from the attention matrix to per-token logits.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyHead {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl SaliencyHead {
    pub fn zeros(l_max: usize) -> Self {
        Self {
            weight: vec![0.0; l_max],
            bias: vec![0.0; l_max],
        }
    }

    pub fn l_max(&self) -> usize {
        self.weight.len()
    }
}

/// Linear classifier over the pooled representation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassHead {
    /// `d_model × n_classes`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl ClassHead {
    pub fn logits(&self, pooled: &[f64]) -> Vec<f64> {
        (0..self.weight.cols())
            .map(|c| {
                self.bias[c]
                    + pooled
                        .iter()
                        .enumerate()
                        .map(|(k, x)| x * self.weight[(k, c)])
                        .sum::<f64>()
            })
            .collect()
    }
}

/// How the positive-term weight of the saliency loss is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositiveWeight {
    /// `max(1, non-salient / salient)` over the real tokens of each batch.
    #[default]
    Balanced,
    /// Always 1.
    Unit,
}

impl PositiveWeight {
    pub fn resolve(self, salient: usize, non_salient: usize) -> f64 {
        match self {
            PositiveWeight::Unit => 1.0,
            PositiveWeight::Balanced if salient == 0 => 1.0,
            PositiveWeight::Balanced => (non_salient as f64 / salient as f64).max(1.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PositiveWeight::Balanced => "balanced",
            PositiveWeight::Unit => "unit",
        }
    }
}

/// `ŷ = Ã·weight + bias`.
pub fn saliency_logits(att: &Matrix, head: &SaliencyHead) -> Result<Vec<f64>> {
    let l = head.l_max();
    if head.bias.len() != l || att.shape() != (l, l) {
        return Err(ModelError::ShapeMismatch(format!(
            "attention {:?}, head weight {}, bias {}",
            att.shape(),
            l,
            head.bias.len()
        )));
    }
    Ok((0..l)
        .map(|i| att.row(i).iter().zip(&head.weight).map(|(a, w)| a * w).sum::<f64>() + head.bias[i])
        .collect())
}

fn real_count(pad_mask: &[bool]) -> usize {
    pad_mask.iter().filter(|&&m| m).count()
}

/// Mean over real tokens of `−[w·y·log σ(ŷ) + (1−y)·log(1−σ(ŷ))]`, logits
/// clamped to ±30. Zero when there are no real tokens.
pub fn saliency_loss(logits: &[f64], target: &SaliencyMask, pad_mask: &[bool], positive_weight: f64) -> f64 {
    let n = real_count(pad_mask);
    if n == 0 {
        return 0.0;
    }
    let total: f64 = logits
        .iter()
        .zip(pad_mask)
        .enumerate()
        .filter(|(_, (_, &real))| real)
        .map(|(i, (&z, _))| {
            let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
            if target.contains(i) {
                positive_weight * softplus(-z)
            } else {
                softplus(z)
            }
        })
        .sum();
    total / n as f64
}

/// `∂l^E/∂ŷ`; zero at pad positions and where the clamp is active.
pub fn saliency_loss_grad(logits: &[f64], target: &SaliencyMask, pad_mask: &[bool], positive_weight: f64) -> Vec<f64> {
    let n = real_count(pad_mask).max(1) as f64;
    logits
        .iter()
        .zip(pad_mask)
        .enumerate()
        .map(|(i, (&z, &real))| {
            if !real || z.abs() >= LOGIT_CLAMP {
                return 0.0;
            }
            let y = if target.contains(i) { 1.0 } else { 0.0 };
            (sigmoid(z) * (positive_weight * y + 1.0 - y) - positive_weight * y) / n
        })
        .collect()
}

/// Gradients of `l^E` with respect to the head's weight and bias.
pub fn saliency_head_grad(
    att: &Matrix,
    head: &SaliencyHead,
    target: &SaliencyMask,
    pad_mask: &[bool],
    positive_weight: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let logits = saliency_logits(att, head)?;
    let d_logits = saliency_loss_grad(&logits, target, pad_mask, positive_weight);
    let l = head.l_max();
    let mut d_weight = vec![0.0; l];
    for (i, &g) in d_logits.iter().enumerate() {
        for (dw, a) in d_weight.iter_mut().zip(att.row(i)) {
            *dw += g * a;
        }
    }
    Ok((d_weight, d_logits))
}

/// Softmax cross-entropy of the class head's logits against `gold`.
pub fn classification_loss(pooled: &[f64], head: &ClassHead, gold: usize) -> f64 {
    let logits = head.logits(pooled);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[gold]
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub class_loss: f64,
    pub saliency_loss: f64,
    pub lambda: f64,
    pub total: f64,
    pub positive_weight: f64,
}

pub fn total_loss(class_loss: f64, saliency_loss: f64, lambda: f64, positive_weight: f64) -> LossBreakdown {
    LossBreakdown {
        class_loss,
        saliency_loss,
        lambda,
        total: class_loss + lambda * saliency_loss,
        positive_weight,
    }
}
