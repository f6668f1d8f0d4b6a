//! Mini-batch Adam training on the joint loss, fine-tune rounds and batch
//! inference.
//!
//! Per-sample gradients may be computed in parallel, but they are always
//! summed in sample order, so results do not depend on thread scheduling.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{joint_parts, LabelMask, LossParts, LossWeights};
use crate::math;
use crate::nn::{Adam, MultiLabelModel, PredictionVector};
use crate::tensor::{Grid, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingParams {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub augmentation: bool,
}

impl Default for TrainingParams {
    fn default() -> Self {
        Self {
            batch_size: 4,
            epochs: 30,
            learning_rate: 1e-4,
            seed: 0,
            augmentation: true,
        }
    }
}

impl TrainingParams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParams("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidParams("epochs must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidParams("learning_rate must be positive and finite".into()));
        }
        Ok(())
    }
}

/// One training item. `image` is resized to the model input on use.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub truth: Vec<f64>,
    pub masks: Vec<LabelMask>,
}

impl Sample {
    pub fn new(image: Tensor, truth: Vec<f64>) -> Self {
        Self {
            image,
            truth,
            masks: Vec::new(),
        }
    }

    pub fn with_masks(mut self, masks: Vec<LabelMask>) -> Self {
        self.masks = masks;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    pub epochs: usize,
    pub mean_loss: f64,
    pub mean_prediction_loss: f64,
    pub mean_attention_loss: f64,
}

/// Model after training plus its per-epoch history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MultiLabelModel,
    pub epochs: Vec<EpochReport>,
}

impl TrainOutcome {
    pub fn epoch_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

/// Trains a copy of `model`; the input model is never modified, so a failed
/// or cancelled run leaves the caller's checkpoint as it was. The sink sees
/// every finished epoch and may stop the run by returning `Break`.
pub fn train<F>(
    model: &MultiLabelModel,
    samples: &[Sample],
    weights: &LossWeights,
    params: &TrainingParams,
    mut sink: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochReport) -> ControlFlow<()>,
{
    params.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let k = model.num_labels();
    for s in samples {
        if s.truth.len() != k {
            return Err(Error::LengthMismatch {
                expected: k,
                actual: s.truth.len(),
            });
        }
    }
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut adam = Adam::new(model.param_count(), params.learning_rate);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(params.epochs);
    // Resizing once up front keeps the epoch loop cheap.
    let prepared: Vec<Tensor> = samples
        .iter()
        .map(|s| model.prepare(&s.image))
        .collect::<Result<_>>()?;

    for epoch in 1..=params.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossParts::default();
        for (batch_no, batch) in order.chunks(params.batch_size).enumerate() {
            let inputs: Vec<(Tensor, Vec<LabelMask>)> = batch
                .iter()
                .map(|&i| {
                    if params.augmentation {
                        augment(&prepared[i], &samples[i].masks, &mut rng)
                    } else {
                        (prepared[i].clone(), samples[i].masks.clone())
                    }
                })
                .collect();
            let results = per_sample(&model, &inputs, batch, samples, weights)?;
            let mut grads = vec![0.0; model.param_count()];
            let mut batch_loss = LossParts::default();
            for (parts, g) in &results {
                batch_loss.prediction += parts.prediction;
                batch_loss.attention += parts.attention;
                batch_loss.total += parts.total;
                for (a, b) in grads.iter_mut().zip(g) {
                    *a += b;
                }
            }
            if !batch_loss.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_no });
            }
            let n = batch.len() as f64;
            grads.iter_mut().for_each(|g| *g /= n);
            adam.step(model.params_mut(), &grads);
            sum.prediction += batch_loss.prediction;
            sum.attention += batch_loss.attention;
            sum.total += batch_loss.total;
        }
        let n = samples.len() as f64;
        let report = EpochReport {
            epoch,
            epochs: params.epochs,
            mean_loss: sum.total / n,
            mean_prediction_loss: sum.prediction / n,
            mean_attention_loss: sum.attention / n,
        };
        history.push(report);
        if sink(&report).is_break() {
            return Err(Error::Cancelled { epoch });
        }
    }
    Ok(TrainOutcome { model, epochs: history })
}

fn sample_grad(
    model: &MultiLabelModel,
    x: &Tensor,
    truth: &[f64],
    masks: &[LabelMask],
    weights: &LossWeights,
) -> Result<(LossParts, Vec<f64>)> {
    let fwd = model.forward(x);
    let mut grads = vec![0.0; model.param_count()];
    let parts = joint_parts(model, &fwd, truth, masks, weights, Some(&mut grads))?;
    Ok((parts, grads))
}

fn per_sample(
    model: &MultiLabelModel,
    inputs: &[(Tensor, Vec<LabelMask>)],
    batch: &[usize],
    samples: &[Sample],
    weights: &LossWeights,
) -> Result<Vec<(LossParts, Vec<f64>)>> {
    let run = |((x, masks), &i): (&(Tensor, Vec<LabelMask>), &usize)| sample_grad(model, x, &samples[i].truth, masks, weights);
    #[cfg(feature = "std")]
    {
        use rayon::prelude::*;
        inputs.par_iter().zip(batch.par_iter()).map(run).collect()
    }
    #[cfg(not(feature = "std"))]
    {
        inputs.iter().zip(batch.iter()).map(run).collect()
    }
}

/// Maximum rotation applied by augmentation, in degrees.
pub const MAX_ROTATION_DEG: f64 = 10.0;
pub const BRIGHTNESS_JITTER: f64 = 0.1;

/// Random horizontal flip, small rotation and brightness scaling. Masks get
/// the same geometric transform so they stay aligned with the image.
pub fn augment<R: Rng>(image: &Tensor, masks: &[LabelMask], rng: &mut R) -> (Tensor, Vec<LabelMask>) {
    let flip = rng.random_bool(0.5);
    let angle = rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG).to_radians();
    let gain = rng.random_range(1.0 - BRIGHTNESS_JITTER..=1.0 + BRIGHTNESS_JITTER);
    let t = Transform::new(flip, angle);
    let (h, w) = (image.height(), image.width());
    let mut out = Tensor::zeros(image.channels(), h, w);
    for c in 0..image.channels() {
        let src = image.plane(c);
        let dst = out.plane_mut(c);
        t.apply(src, dst, h, w, None);
        for v in dst.iter_mut() {
            *v = (*v * gain).clamp(0.0, 1.0);
        }
    }
    let masks = masks
        .iter()
        .map(|m| {
            let (mh, mw) = m.mask.shape();
            let mut g = Grid::zeros(mh, mw);
            t.apply(m.mask.data(), g.data_mut(), mh, mw, Some(0.0));
            LabelMask {
                label: m.label,
                mask: g,
                correction: m.correction,
            }
        })
        .collect();
    (out, masks)
}

/// Flip then rotate about the center, in resolution-independent coordinates.
struct Transform {
    flip: bool,
    cos: f64,
    sin: f64,
}

impl Transform {
    fn new(flip: bool, angle: f64) -> Self {
        Self {
            flip,
            cos: math::cos(angle),
            sin: math::sin(angle),
        }
    }

    /// Inverse-maps every output cell and samples bilinearly. `fill` is used
    /// outside the source; `None` clamps to the nearest edge.
    fn apply(&self, src: &[f64], dst: &mut [f64], h: usize, w: usize, fill: Option<f64>) {
        let aspect = h as f64 / w as f64;
        for y in 0..h {
            for x in 0..w {
                let mut u = (x as f64 + 0.5) / w as f64 - 0.5;
                let v = ((y as f64 + 0.5) / h as f64 - 0.5) * aspect;
                if self.flip {
                    u = -u;
                }
                let su = self.cos * u + self.sin * v;
                let sv = (-self.sin * u + self.cos * v) / aspect;
                let sx = (su + 0.5) * w as f64 - 0.5;
                let sy = (sv + 0.5) * h as f64 - 0.5;
                dst[y * w + x] = bilinear(src, h, w, sy, sx, fill);
            }
        }
    }
}

fn bilinear(src: &[f64], h: usize, w: usize, y: f64, x: f64, fill: Option<f64>) -> f64 {
    let outside = y < -0.5 || x < -0.5 || y > h as f64 - 0.5 || x > w as f64 - 0.5;
    if let (true, Some(f)) = (outside, fill) {
        return f;
    }
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = math::floor(y) as usize;
    let x0 = math::floor(x) as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
    let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Fine-tunes on annotated items plus unmasked replay items. The result
/// carries the next round index; `model` itself is left untouched.
pub fn finetune_round<F>(
    model: &MultiLabelModel,
    batch: &[Sample],
    replay: &[Sample],
    weights: &LossWeights,
    params: &TrainingParams,
    sink: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochReport) -> ControlFlow<()>,
{
    if batch.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    for s in batch {
        for m in &s.masks {
            if m.label >= s.truth.len() {
                return Err(Error::LabelOutOfRange {
                    index: m.label,
                    labels: s.truth.len(),
                });
            }
            if m.mask.sum() <= 0.0 {
                return Err(Error::EmptyMask);
            }
            if s.truth[m.label] != 1.0 && !m.correction {
                return Err(Error::InvalidArgument(alloc::format!(
                    "mask for label {} on a negative item is not marked as a correction",
                    m.label
                )));
            }
        }
    }
    let mut all = Vec::with_capacity(batch.len() + replay.len());
    all.extend_from_slice(batch);
    all.extend(replay.iter().map(|s| Sample::new(s.image.clone(), s.truth.clone())));
    let mut out = train(model, &all, weights, params, sink)?;
    out.model.set_round_index(model.round_index() + 1);
    Ok(out)
}

/// Picks `round(fraction · n)` distinct indices out of `0..n`, sorted.
pub fn replay_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidParams(alloc::format!("replay fraction {fraction} not in [0, 1]")));
    }
    let take = (math::round(fraction * n as f64) as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(take);
    idx.sort_unstable();
    Ok(idx)
}

/// Predictions for many images, in input order.
pub fn predict_all(model: &MultiLabelModel, images: &[&Tensor]) -> Result<Vec<PredictionVector>> {
    #[cfg(feature = "std")]
    {
        use rayon::prelude::*;
        images.par_iter().map(|im| model.predict(im)).collect()
    }
    #[cfg(not(feature = "std"))]
    {
        images.iter().map(|im| model.predict(im)).collect()
    }
}
