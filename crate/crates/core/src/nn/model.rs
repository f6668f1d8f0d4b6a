use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, Conv};
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    SmallCnn,
    DensenetLike,
    ResnetLike,
}

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::SmallCnn => "small_cnn",
            BackboneKind::DensenetLike => "densenet_like",
            BackboneKind::ResnetLike => "resnet_like",
        }
    }

    /// Name of the layer whose activations Grad-CAM reads.
    pub fn feature_layer(self) -> &'static str {
        match self {
            BackboneKind::SmallCnn => "block3.conv",
            BackboneKind::DensenetLike => "dense2.concat",
            BackboneKind::ResnetLike => "block3.conv",
        }
    }
}

fn default_channels() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub num_labels: usize,
    pub input_size: usize,
    pub pretrained: bool,
    #[serde(default = "default_channels")]
    pub in_channels: usize,
}

impl ModelConfig {
    pub fn new(backbone: BackboneKind, num_labels: usize, input_size: usize) -> Self {
        Self {
            backbone,
            num_labels,
            input_size,
            pretrained: false,
            in_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_labels < 1 {
            return Err(Error::InvalidConfig("num_labels must be at least 1".into()));
        }
        if self.input_size < 32 {
            return Err(Error::InvalidConfig(format!(
                "input_size must be at least 32, got {}",
                self.input_size
            )));
        }
        if self.in_channels < 1 {
            return Err(Error::InvalidConfig("in_channels must be at least 1".into()));
        }
        Ok(())
    }
}

/// One stage of a backbone.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Layer {
    Conv(Conv),
    Relu,
    MaxPool,
    AvgPool,
    /// conv → relu → conv, plus identity skip, then relu.
    Residual(Conv, Conv),
    /// Each conv sees the concatenation of all previous outputs.
    Dense(Vec<Conv>),
}

enum Cache {
    Conv(Vec<f64>),
    Relu(Tensor),
    MaxPool(Vec<u32>, (usize, usize, usize)),
    AvgPool((usize, usize, usize)),
    Residual {
        cols1: Vec<f64>,
        mid: Tensor,
        cols2: Vec<f64>,
        out: Tensor,
    },
    Dense(Vec<(Vec<f64>, Tensor, usize)>),
}

/// Layer stack plus a linear head over globally average-pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    kind: Option<BackboneKind>,
    layers: Vec<Layer>,
    in_channels: usize,
    feature_channels: usize,
    backbone_params: usize,
    num_labels: usize,
}

impl Network {
    fn build(kind: BackboneKind, in_channels: usize, num_labels: usize) -> Self {
        let mut cur = 0usize;
        let layers = match kind {
            BackboneKind::SmallCnn => vec![
                Layer::Conv(Conv::new(in_channels, 8, &mut cur)),
                Layer::Relu,
                Layer::MaxPool,
                Layer::Conv(Conv::new(8, 16, &mut cur)),
                Layer::Relu,
                Layer::MaxPool,
                Layer::Conv(Conv::new(16, 16, &mut cur)),
                Layer::Relu,
            ],
            BackboneKind::ResnetLike => {
                let stem = Conv::new(in_channels, 16, &mut cur);
                let r1 = (Conv::new(16, 16, &mut cur), Conv::new(16, 16, &mut cur));
                let r2 = (Conv::new(16, 16, &mut cur), Conv::new(16, 16, &mut cur));
                let last = Conv::new(16, 32, &mut cur);
                vec![
                    Layer::Conv(stem),
                    Layer::Relu,
                    Layer::MaxPool,
                    Layer::Residual(r1.0, r1.1),
                    Layer::MaxPool,
                    Layer::Residual(r2.0, r2.1),
                    Layer::Conv(last),
                    Layer::Relu,
                ]
            }
            BackboneKind::DensenetLike => {
                let stem = Conv::new(in_channels, 16, &mut cur);
                let d1 = vec![Conv::new(16, 8, &mut cur), Conv::new(24, 8, &mut cur)];
                let trans = Conv::new(32, 16, &mut cur);
                let d2 = vec![Conv::new(16, 8, &mut cur), Conv::new(24, 8, &mut cur)];
                vec![
                    Layer::Conv(stem),
                    Layer::Relu,
                    Layer::MaxPool,
                    Layer::Dense(d1),
                    Layer::Conv(trans),
                    Layer::Relu,
                    Layer::AvgPool,
                    Layer::Dense(d2),
                ]
            }
        };
        let mut net = Self::from_layers(layers, in_channels, num_labels);
        net.kind = Some(kind);
        net
    }

    pub(crate) fn from_layers(layers: Vec<Layer>, in_channels: usize, num_labels: usize) -> Self {
        let mut ch = in_channels;
        let mut params = 0;
        for l in &layers {
            match l {
                Layer::Conv(c) => {
                    ch = c.out_ch;
                    params += c.param_len();
                }
                Layer::Residual(a, b) => params += a.param_len() + b.param_len(),
                Layer::Dense(convs) => {
                    for c in convs {
                        ch += c.out_ch;
                        params += c.param_len();
                    }
                }
                _ => {}
            }
        }
        Self {
            kind: None,
            layers,
            in_channels,
            feature_channels: ch,
            backbone_params: params,
            num_labels,
        }
    }

    pub fn has_conv(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, Layer::Conv(_) | Layer::Residual(..) | Layer::Dense(_)))
    }

    pub fn feature_channels(&self) -> usize {
        self.feature_channels
    }

    /// Spatial size of the feature maps (and so of every heatmap) for a
    /// square input of side `input`.
    pub fn feature_size(&self, input: usize) -> usize {
        let pools = self
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::MaxPool | Layer::AvgPool))
            .count();
        input >> pools
    }

    pub fn backbone_param_count(&self) -> usize {
        self.backbone_params
    }

    pub fn param_count(&self) -> usize {
        self.backbone_params + self.num_labels * self.feature_channels + self.num_labels
    }

    fn head_w_off(&self) -> usize {
        self.backbone_params
    }

    fn head_b_off(&self) -> usize {
        self.backbone_params + self.num_labels * self.feature_channels
    }

    fn init_backbone<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        for l in &self.layers {
            match l {
                Layer::Conv(c) => c.init(params, rng),
                Layer::Residual(a, b) => {
                    a.init(params, rng);
                    b.init(params, rng);
                }
                Layer::Dense(convs) => convs.iter().for_each(|c| c.init(params, rng)),
                _ => {}
            }
        }
    }

    fn init_head<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        let bound = math::sqrt(6.0 / (self.feature_channels + self.num_labels) as f64);
        for w in &mut params[self.head_w_off()..self.head_b_off()] {
            *w = rng.random_range(-bound..bound);
        }
        params[self.head_b_off()..].fill(0.0);
    }
}

/// Activations recorded by a forward pass, consumed by the backward pass and
/// by Grad-CAM.
pub struct Forward {
    caches: Vec<Cache>,
    shapes: Vec<(usize, usize, usize)>,
    /// Output of the feature layer (input to global average pooling).
    pub features: Tensor,
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionVector {
    pub probabilities: Vec<f64>,
    pub threshold: f64,
}

impl PredictionVector {
    pub const DEFAULT_THRESHOLD: f64 = 0.5;

    pub fn new(probabilities: Vec<f64>) -> Self {
        Self {
            probabilities,
            threshold: Self::DEFAULT_THRESHOLD,
        }
    }

    pub fn binarized(&self) -> Vec<u8> {
        self.probabilities
            .iter()
            .map(|&p| u8::from(p >= self.threshold))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }
}

/// Serializable model state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub config: ModelConfig,
    pub round_index: u32,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiLabelModel {
    config: ModelConfig,
    net: Network,
    params: Vec<f64>,
    round_index: u32,
}

/// Builds a randomly initialized model. Asking for pretrained weights here is
/// an error; use [`build_model_with_backbone_weights`] with weights loaded by
/// the caller.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<MultiLabelModel> {
    config.validate()?;
    if config.pretrained {
        return Err(Error::PretrainedUnavailable(config.backbone.name().into()));
    }
    let net = Network::build(config.backbone, config.in_channels, config.num_labels);
    let mut params = vec![0.0; net.param_count()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.init_backbone(&mut params, &mut rng);
    net.init_head(&mut params, &mut rng);
    Ok(MultiLabelModel {
        config: config.clone(),
        net,
        params,
        round_index: 0,
    })
}

/// Builds a model whose backbone starts from `weights`; the head is freshly
/// initialized from `seed`.
pub fn build_model_with_backbone_weights(
    config: &ModelConfig,
    weights: &[f64],
    seed: u64,
) -> Result<MultiLabelModel> {
    config.validate()?;
    let net = Network::build(config.backbone, config.in_channels, config.num_labels);
    if weights.len() != net.backbone_param_count() {
        return Err(Error::LengthMismatch {
            expected: net.backbone_param_count(),
            actual: weights.len(),
        });
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("pretrained weights".into()));
    }
    let mut params = vec![0.0; net.param_count()];
    params[..weights.len()].copy_from_slice(weights);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.init_head(&mut params, &mut rng);
    Ok(MultiLabelModel {
        config: config.clone(),
        net,
        params,
        round_index: 0,
    })
}

impl MultiLabelModel {
    pub fn from_snapshot(snapshot: ModelSnapshot) -> Result<Self> {
        snapshot.config.validate()?;
        let cfg = snapshot.config;
        let net = Network::build(cfg.backbone, cfg.in_channels, cfg.num_labels);
        if snapshot.params.len() != net.param_count() {
            return Err(Error::LengthMismatch {
                expected: net.param_count(),
                actual: snapshot.params.len(),
            });
        }
        Ok(Self {
            config: cfg,
            net,
            params: snapshot.params,
            round_index: snapshot.round_index,
        })
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            config: self.config.clone(),
            round_index: self.round_index,
            params: self.params.clone(),
        }
    }

    /// Model over an explicit layer stack (used for toy networks in tests).
    #[cfg(test)]
    pub(crate) fn from_network(config: ModelConfig, net: Network, params: Vec<f64>) -> Self {
        assert_eq!(params.len(), net.param_count());
        Self {
            config,
            net,
            params,
            round_index: 0,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn num_labels(&self) -> usize {
        self.config.num_labels
    }

    /// `(rows, cols)` of this model's heatmaps.
    pub fn heatmap_shape(&self) -> (usize, usize) {
        let s = self.net.feature_size(self.config.input_size);
        (s, s)
    }

    pub fn round_index(&self) -> u32 {
        self.round_index
    }

    pub fn set_round_index(&mut self, round: u32) {
        self.round_index = round;
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Head weights for `label` (one per feature channel).
    pub fn head_row(&self, label: usize) -> &[f64] {
        let f = self.net.feature_channels;
        let off = self.net.head_w_off() + label * f;
        &self.params[off..off + f]
    }

    pub fn head_row_mut(&mut self, label: usize) -> &mut [f64] {
        let f = self.net.feature_channels;
        let off = self.net.head_w_off() + label * f;
        &mut self.params[off..off + f]
    }

    pub fn head_bias_mut(&mut self) -> &mut [f64] {
        let off = self.net.head_b_off();
        &mut self.params[off..]
    }

    pub(crate) fn head_w_index(&self, label: usize, channel: usize) -> usize {
        self.net.head_w_off() + label * self.net.feature_channels + channel
    }

    /// Resizes `image` to the configured input size if needed.
    pub fn prepare(&self, image: &Tensor) -> Result<Tensor> {
        if image.channels() != self.config.in_channels {
            return Err(Error::InvalidArgument(format!(
                "image has {} channels, model expects {}",
                image.channels(),
                self.config.in_channels
            )));
        }
        let s = self.config.input_size;
        Ok(image.resize_bilinear(s, s))
    }

    pub fn forward(&self, image: &Tensor) -> Forward {
        let p = &self.params;
        let mut caches = Vec::with_capacity(self.net.layers.len());
        let mut shapes = Vec::with_capacity(self.net.layers.len());
        let mut x = image.clone();
        for layer in &self.net.layers {
            shapes.push((x.channels(), x.height(), x.width()));
            match layer {
                Layer::Conv(c) => {
                    let (y, cols) = c.forward(p, &x);
                    caches.push(Cache::Conv(cols));
                    x = y;
                }
                Layer::Relu => {
                    x = layers::relu(x);
                    caches.push(Cache::Relu(x.clone()));
                }
                Layer::MaxPool => {
                    let shape = (x.channels(), x.height(), x.width());
                    let (y, am) = layers::max_pool(&x);
                    caches.push(Cache::MaxPool(am, shape));
                    x = y;
                }
                Layer::AvgPool => {
                    let shape = (x.channels(), x.height(), x.width());
                    x = layers::avg_pool(&x);
                    caches.push(Cache::AvgPool(shape));
                }
                Layer::Residual(a, b) => {
                    let (c1, cols1) = a.forward(p, &x);
                    let mid = layers::relu(c1);
                    let (c2, cols2) = b.forward(p, &mid);
                    let mut sum = c2;
                    for (s, v) in sum.data_mut().iter_mut().zip(x.data()) {
                        *s += v;
                    }
                    let out = layers::relu(sum);
                    caches.push(Cache::Residual {
                        cols1,
                        mid,
                        cols2,
                        out: out.clone(),
                    });
                    x = out;
                }
                Layer::Dense(convs) => {
                    let mut steps = Vec::with_capacity(convs.len());
                    for c in convs {
                        let (y, cols) = c.forward(p, &x);
                        let y = layers::relu(y);
                        let split = x.channels();
                        x = layers::concat_channels(&x, &y);
                        steps.push((cols, y, split));
                    }
                    caches.push(Cache::Dense(steps));
                }
            }
        }
        let features = x;
        let f = features.channels();
        let n = features.plane_len() as f64;
        let pooled: Vec<f64> = (0..f).map(|c| features.plane(c).iter().sum::<f64>() / n).collect();
        let logits = (0..self.config.num_labels)
            .map(|k| {
                let row = self.head_row(k);
                let b = self.params[self.net.head_b_off() + k];
                b + row.iter().zip(&pooled).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        Forward {
            caches,
            shapes,
            features,
            pooled,
            logits,
        }
    }

    /// Gradient of the logit for `label` with respect to the feature maps.
    pub fn logit_feature_gradient(&self, fwd: &Forward, label: usize) -> Tensor {
        let f = &fwd.features;
        let n = f.plane_len() as f64;
        let mut g = Tensor::zeros(f.channels(), f.height(), f.width());
        for (c, &w) in self.head_row(label).iter().enumerate() {
            g.plane_mut(c).fill(w / n);
        }
        g
    }

    /// Backpropagates `d_logits` (and an optional extra gradient arriving
    /// directly at the feature maps), accumulating into `grads`.
    pub fn backward(&self, fwd: &Forward, d_logits: &[f64], d_features: Option<&Tensor>, grads: &mut [f64]) {
        assert_eq!(grads.len(), self.params.len());
        let fch = self.net.feature_channels;
        let feats = &fwd.features;
        let n = feats.plane_len() as f64;
        let mut d_pooled = vec![0.0; fch];
        for (k, &dl) in d_logits.iter().enumerate() {
            if dl == 0.0 {
                continue;
            }
            let w_off = self.net.head_w_off() + k * fch;
            for c in 0..fch {
                grads[w_off + c] += dl * fwd.pooled[c];
                d_pooled[c] += dl * self.params[w_off + c];
            }
            grads[self.net.head_b_off() + k] += dl;
        }
        let mut dx = match d_features {
            Some(extra) => extra.clone(),
            None => Tensor::zeros(feats.channels(), feats.height(), feats.width()),
        };
        for (c, &dp) in d_pooled.iter().enumerate() {
            let g = dp / n;
            for v in dx.plane_mut(c) {
                *v += g;
            }
        }
        self.backward_backbone(fwd, dx, grads);
    }

    fn backward_backbone(&self, fwd: &Forward, mut dx: Tensor, grads: &mut [f64]) {
        let p = &self.params;
        for ((layer, cache), &shape) in self
            .net
            .layers
            .iter()
            .zip(&fwd.caches)
            .zip(&fwd.shapes)
            .rev()
        {
            dx = match (layer, cache) {
                (Layer::Conv(c), Cache::Conv(cols)) => c.backward(p, cols, &dx, grads),
                (Layer::Relu, Cache::Relu(out)) => layers::relu_backward(out, dx),
                (Layer::MaxPool, Cache::MaxPool(am, s)) => layers::max_pool_backward(am, *s, &dx),
                (Layer::AvgPool, Cache::AvgPool(s)) => layers::avg_pool_backward(*s, &dx),
                (
                    Layer::Residual(a, b),
                    Cache::Residual {
                        cols1,
                        mid,
                        cols2,
                        out,
                    },
                ) => {
                    let d_sum = layers::relu_backward(out, dx);
                    let d_mid = b.backward(p, cols2, &d_sum, grads);
                    let d_c1 = layers::relu_backward(mid, d_mid);
                    let mut d_in = a.backward(p, cols1, &d_c1, grads);
                    for (d, s) in d_in.data_mut().iter_mut().zip(d_sum.data()) {
                        *d += s;
                    }
                    d_in
                }
                (Layer::Dense(convs), Cache::Dense(steps)) => {
                    let mut d = dx;
                    for (c, (cols, y, split)) in convs.iter().zip(steps).rev() {
                        let (mut d_prev, d_y) = layers::split_channels(&d, *split);
                        let d_pre = layers::relu_backward(y, d_y);
                        let d_in = c.backward(p, cols, &d_pre, grads);
                        for (a, b) in d_prev.data_mut().iter_mut().zip(d_in.data()) {
                            *a += b;
                        }
                        d = d_prev;
                    }
                    d
                }
                _ => unreachable!("cache does not match layer"),
            };
            debug_assert_eq!((dx.channels(), dx.height(), dx.width()), shape);
        }
    }

    pub fn predict(&self, image: &Tensor) -> Result<PredictionVector> {
        let x = self.prepare(image)?;
        let fwd = self.forward(&x);
        if fwd.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(PredictionVector::new(
            fwd.logits.iter().map(|&z| math::sigmoid(z)).collect(),
        ))
    }
}

/// Forward pass on an already prepared image: class probabilities.
pub fn predict(model: &MultiLabelModel, image: &Tensor) -> Result<PredictionVector> {
    model.predict(image)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_cnn_zero_image_gives_finite_logits() {
        let m = build_model(&ModelConfig::new(BackboneKind::SmallCnn, 2, 32), 1).unwrap();
        let fwd = m.forward(&Tensor::zeros(3, 32, 32));
        assert_eq!(fwd.logits.len(), 2);
        assert!(fwd.logits.iter().all(|v| v.is_finite()));
        assert!(m.param_count() <= 5_000);
    }

    #[test]
    fn all_backbones_produce_k_logits() {
        for kind in [
            BackboneKind::SmallCnn,
            BackboneKind::DensenetLike,
            BackboneKind::ResnetLike,
        ] {
            let m = build_model(&ModelConfig::new(kind, 14, 32), 3).unwrap();
            let p = m.predict(&Tensor::filled(3, 40, 40, 0.3)).unwrap();
            assert_eq!(p.len(), 14, "{kind:?}");
            assert!(p.probabilities.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = ModelConfig::new(BackboneKind::SmallCnn, 3, 32);
        let a = build_model(&cfg, 9).unwrap();
        let b = build_model(&cfg, 9).unwrap();
        let c = build_model(&cfg, 10).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.head_row(0), c.head_row(0));
    }

    #[test]
    fn pretrained_without_weights_is_error() {
        let mut cfg = ModelConfig::new(BackboneKind::DensenetLike, 2, 32);
        cfg.pretrained = true;
        assert_eq!(
            build_model(&cfg, 0),
            Err(Error::PretrainedUnavailable("densenet_like".into()))
        );
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(build_model(&ModelConfig::new(BackboneKind::SmallCnn, 0, 32), 0).is_err());
        assert!(build_model(&ModelConfig::new(BackboneKind::SmallCnn, 2, 16), 0).is_err());
    }

    #[test]
    fn zero_head_predicts_one_half() {
        let mut m = build_model(&ModelConfig::new(BackboneKind::SmallCnn, 4, 32), 0).unwrap();
        let head_start = m.network().backbone_param_count();
        m.params_mut()[head_start..].fill(0.0);
        let p = m.predict(&Tensor::filled(3, 32, 32, 0.8)).unwrap();
        assert!(p.probabilities.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn snapshot_round_trip() {
        let m = build_model(&ModelConfig::new(BackboneKind::ResnetLike, 2, 32), 5).unwrap();
        let back = MultiLabelModel::from_snapshot(m.snapshot()).unwrap();
        assert_eq!(back, m);
    }
}
