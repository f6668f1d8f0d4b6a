//! Prediction loss (mean binary cross-entropy), attention loss (MSE between a
//! Grad-CAM heatmap and an expert mask), frequency-based attention weights,
//! and the joint loss with its gradient.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::LabelStats;
use crate::error::{Error, Result};
use crate::explain::{cam_from_forward, Heatmap};
use crate::math;
use crate::nn::{Forward, MultiLabelModel, PredictionVector};
use crate::tensor::{Grid, Tensor};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;

fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(y * math::ln(p) + (1.0 - y) * math::ln(1.0 - p))
}

/// Mean over labels of the binary cross-entropy.
pub fn bce_prediction_loss(prediction: &PredictionVector, truth: &[f64]) -> Result<f64> {
    let p = &prediction.probabilities;
    if p.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            actual: truth.len(),
        });
    }
    if p.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = p.iter().zip(truth).map(|(&p, &y)| bce_term(p, y)).sum();
    Ok(sum / p.len() as f64)
}

/// Mean BCE from logits together with its gradient with respect to them.
/// The gradient is zero where the clamp is active, matching the loss value.
pub(crate) fn bce_with_grad(logits: &[f64], truth: &[f64]) -> (f64, Vec<f64>) {
    let k = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (i, (&z, &y)) in logits.iter().zip(truth).enumerate() {
        let p = math::sigmoid(z);
        loss += bce_term(p, y);
        if p > PROB_EPS && p < 1.0 - PROB_EPS {
            grad[i] = (p - y) / k;
        }
    }
    (loss / k, grad)
}

/// Mean squared difference between two equally shaped grids.
pub fn mse(values: &Grid, mask: &Grid) -> Result<f64> {
    if values.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            expected: values.shape(),
            actual: mask.shape(),
        });
    }
    if values.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = values
        .data()
        .iter()
        .zip(mask.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / values.len() as f64)
}

/// MSE between the normalized heatmap and a mask at the heatmap's native
/// resolution. No resampling happens here.
pub fn attention_loss(heatmap: &Heatmap, mask: &Grid) -> Result<f64> {
    mse(&heatmap.values, mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub base_weight: f64,
    pub per_label: Vec<f64>,
}

impl LossWeights {
    pub fn uniform(num_labels: usize, base_weight: f64) -> Self {
        Self {
            base_weight,
            per_label: vec![base_weight; num_labels],
        }
    }

    pub fn get(&self, label: usize) -> f64 {
        self.per_label[label]
    }

    /// Same per-label ratios with the base weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            base_weight: self.base_weight * factor,
            per_label: self.per_label.iter().map(|w| w * factor).collect(),
        }
    }
}

/// Attention weight per label: `base · count_max / count_c`, so the rarest
/// labels get the largest weight. Labels with no positives get
/// `base · count_max`; annotating such a label is an error.
pub fn dynamic_weights(stats: &LabelStats, base_weight: f64, annotated_labels: &[usize]) -> Result<LossWeights> {
    if !(base_weight > 0.0 && base_weight.is_finite()) {
        return Err(Error::InvalidArgument(alloc::format!(
            "base weight must be positive, got {base_weight}"
        )));
    }
    for &c in annotated_labels {
        match stats.counts.get(c) {
            None => {
                return Err(Error::LabelOutOfRange {
                    index: c,
                    labels: stats.counts.len(),
                })
            }
            Some(0) => return Err(Error::UnlearnableLabel(c)),
            Some(_) => {}
        }
    }
    let max = stats.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let per_label = stats
        .counts
        .iter()
        .map(|&n| base_weight * max / (n.max(1) as f64))
        .collect();
    Ok(LossWeights {
        base_weight,
        per_label,
    })
}

/// Expert mask for one label of one image, at heatmap resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMask {
    pub label: usize,
    pub mask: Grid,
    /// Set when the mask targets a label that is negative in the truth vector.
    #[serde(default)]
    pub correction: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub prediction: f64,
    pub attention: f64,
    pub total: f64,
}

/// Prediction loss plus `Σ λ_c · attention_loss(grad_cam(c), mask_c)`.
pub fn joint_loss(
    model: &MultiLabelModel,
    image: &Tensor,
    truth: &[f64],
    masks: &[LabelMask],
    weights: &LossWeights,
) -> Result<f64> {
    let x = model.prepare(image)?;
    let fwd = model.forward(&x);
    Ok(joint_parts(model, &fwd, truth, masks, weights, None)?.total)
}

/// Loss value and, when `grads` is given, its gradient accumulated into it.
pub(crate) fn joint_parts(
    model: &MultiLabelModel,
    fwd: &Forward,
    truth: &[f64],
    masks: &[LabelMask],
    weights: &LossWeights,
    grads: Option<&mut [f64]>,
) -> Result<LossParts> {
    let k = model.num_labels();
    if truth.len() != k {
        return Err(Error::LengthMismatch {
            expected: k,
            actual: truth.len(),
        });
    }
    let (prediction, d_logits) = bce_with_grad(&fwd.logits, truth);
    let mut total = prediction;
    let mut attention = 0.0;
    let want_grad = grads.is_some();
    let feats = &fwd.features;
    let mut d_feats: Option<Tensor> = None;
    let mut head_grads: Vec<(usize, f64)> = Vec::new();
    for lm in masks {
        if lm.label >= k {
            return Err(Error::LabelOutOfRange {
                index: lm.label,
                labels: k,
            });
        }
        let fshape = (feats.height(), feats.width());
        if lm.mask.shape() != fshape {
            return Err(Error::ShapeMismatch {
                expected: fshape,
                actual: lm.mask.shape(),
            });
        }
        let lambda = weights.get(lm.label);
        let term = attention_term(model, fwd, lm, lambda, want_grad)?;
        attention += term.loss;
        total += term.loss;
        if let Some((d_a, head)) = term.grad {
            match d_feats.as_mut() {
                Some(acc) => acc.data_mut().iter_mut().zip(d_a.data()).for_each(|(a, b)| *a += b),
                None => d_feats = Some(d_a),
            }
            head_grads.extend(head);
        }
    }
    if let Some(grads) = grads {
        for (idx, g) in head_grads {
            grads[idx] += g;
        }
        model.backward(fwd, &d_logits, d_feats.as_ref(), grads);
    }
    Ok(LossParts {
        prediction,
        attention,
        total,
    })
}

struct AttentionTerm {
    loss: f64,
    /// Gradient w.r.t. the feature maps plus direct head-weight gradients.
    grad: Option<(Tensor, Vec<(usize, f64)>)>,
}

/// `λ · mse(minmax(relu(Σ_k α_k A^k)), mask)` and its gradient.
///
/// For the global-average-pool + linear head, `α_k = W[c, k] / (h·w)`, so
/// the second-order path through the Grad-CAM weights reduces to a direct
/// gradient on the head row of label `c`.
fn attention_term(
    model: &MultiLabelModel,
    fwd: &Forward,
    lm: &LabelMask,
    lambda: f64,
    want_grad: bool,
) -> Result<AttentionTerm> {
    let cam = cam_from_forward(model, fwd, lm.label);
    let norm = crate::explain::normalize_heatmap(&cam.raw)?;
    let loss = lambda * mse(&norm.values, &lm.mask)?;
    if !want_grad {
        return Ok(AttentionTerm { loss, grad: None });
    }
    let feats = &fwd.features;
    let n = cam.raw.len();
    let mut d_feats = Tensor::zeros(feats.channels(), feats.height(), feats.width());
    if norm.degenerate {
        return Ok(AttentionTerm {
            loss,
            grad: Some((d_feats, Vec::new())),
        });
    }
    // dL/dv
    let g: Vec<f64> = norm
        .values
        .data()
        .iter()
        .zip(lm.mask.data())
        .map(|(v, m)| 2.0 * lambda * (v - m) / n as f64)
        .collect();
    // Through min-max scaling.
    let raw = cam.raw.data();
    let (mut imin, mut imax) = (0, 0);
    for (i, &r) in raw.iter().enumerate() {
        if r < raw[imin] {
            imin = i;
        }
        if r > raw[imax] {
            imax = i;
        }
    }
    let span = raw[imax] - raw[imin];
    let v = norm.values.data();
    let mut d_raw: Vec<f64> = g.iter().map(|gi| gi / span).collect();
    let s_min: f64 = g.iter().zip(v).map(|(gi, vi)| gi * (1.0 - vi)).sum();
    let s_max: f64 = g.iter().zip(v).map(|(gi, vi)| gi * vi).sum();
    d_raw[imin] -= s_min / span;
    d_raw[imax] -= s_max / span;
    // Through the ReLU.
    let d_pre: Vec<f64> = d_raw
        .iter()
        .zip(cam.pre.data())
        .map(|(&d, &p)| if p > 0.0 { d } else { 0.0 })
        .collect();
    // Through the weighted channel sum.
    let hw = feats.plane_len() as f64;
    let mut head = Vec::with_capacity(feats.channels());
    for (c, &alpha) in cam.alpha.iter().enumerate() {
        let plane = feats.plane(c);
        let d_alpha: f64 = d_pre.iter().zip(plane).map(|(d, a)| d * a).sum();
        head.push((model.head_w_index(lm.label, c), d_alpha / hw));
        if alpha != 0.0 {
            for (o, d) in d_feats.plane_mut(c).iter_mut().zip(&d_pre) {
                *o = alpha * d;
            }
        }
    }
    Ok(AttentionTerm {
        loss,
        grad: Some((d_feats, head)),
    })
}

/// Loss and full parameter gradient for one sample.
pub fn joint_loss_and_grad(
    model: &MultiLabelModel,
    image: &Tensor,
    truth: &[f64],
    masks: &[LabelMask],
    weights: &LossWeights,
) -> Result<(LossParts, Vec<f64>)> {
    let x = model.prepare(image)?;
    let fwd = model.forward(&x);
    let mut grads = vec![0.0; model.param_count()];
    let parts = joint_parts(model, &fwd, truth, masks, weights, Some(&mut grads))?;
    Ok((parts, grads))
}
