//! Grad-CAM heatmaps: computation from the feature layer, min-max
//! normalization, and color overlays for display.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Forward, MultiLabelModel};
use crate::tensor::{Grid, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub image_id: String,
    pub label_index: usize,
    pub round_index: u32,
    /// Post-ReLU weighted feature sum, at feature-map resolution.
    pub raw: Grid,
    /// `raw` min-max scaled to [0, 1]; all zeros when `raw` is constant.
    pub values: Grid,
    pub degenerate: bool,
}

impl Heatmap {
    pub fn with_image_id(mut self, image_id: impl Into<String>) -> Self {
        self.image_id = image_id.into();
        self
    }

    /// Values upsampled bilinearly to a display resolution.
    pub fn display(&self, rows: usize, cols: usize) -> Grid {
        let mut g = self.values.resize_bilinear(rows, cols);
        for v in g.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub values: Grid,
    pub degenerate: bool,
}

/// Rescales to `(x - min) / (max - min)`. A constant input maps to all zeros
/// and is flagged degenerate.
pub fn normalize_heatmap(raw: &Grid) -> Result<Normalized> {
    if raw.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("heatmap entry".into()));
    }
    if raw.is_empty() {
        return Err(Error::InvalidArgument("empty heatmap".into()));
    }
    let (lo, hi) = (raw.min_value(), raw.max_value());
    let mut values = Grid::zeros(raw.rows(), raw.cols());
    if hi <= lo {
        return Ok(Normalized {
            values,
            degenerate: true,
        });
    }
    let span = hi - lo;
    for (o, &v) in values.data_mut().iter_mut().zip(raw.data()) {
        *o = (v - lo) / span;
    }
    Ok(Normalized {
        values,
        degenerate: false,
    })
}

/// Intermediate Grad-CAM quantities kept for the attention-loss backward pass.
pub(crate) struct CamTrace {
    /// Channel importance weights (spatial mean of the logit gradient).
    pub alpha: Vec<f64>,
    /// Weighted channel sum before the ReLU.
    pub pre: Grid,
    pub raw: Grid,
}

pub(crate) fn cam_from_forward(model: &MultiLabelModel, fwd: &Forward, label: usize) -> CamTrace {
    let grad = model.logit_feature_gradient(fwd, label);
    let feats = &fwd.features;
    let n = feats.plane_len();
    let alpha: Vec<f64> = (0..feats.channels())
        .map(|c| grad.plane(c).iter().sum::<f64>() / n as f64)
        .collect();
    let mut pre = Grid::zeros(feats.height(), feats.width());
    for (c, &a) in alpha.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for (p, &v) in pre.data_mut().iter_mut().zip(feats.plane(c)) {
            *p += a * v;
        }
    }
    let mut raw = pre.clone();
    for v in raw.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    CamTrace { alpha, pre, raw }
}

/// Grad-CAM for `label_index` at the model's feature layer.
pub fn grad_cam(model: &MultiLabelModel, image: &Tensor, label_index: usize) -> Result<Heatmap> {
    let k = model.num_labels();
    if label_index >= k {
        return Err(Error::LabelOutOfRange {
            index: label_index,
            labels: k,
        });
    }
    if !model.network().has_conv() {
        return Err(Error::NoConvLayer);
    }
    let x = model.prepare(image)?;
    let fwd = model.forward(&x);
    heatmap_from_forward(model, &fwd, label_index)
}

pub(crate) fn heatmap_from_forward(model: &MultiLabelModel, fwd: &Forward, label_index: usize) -> Result<Heatmap> {
    let trace = cam_from_forward(model, fwd, label_index);
    let norm = normalize_heatmap(&trace.raw)?;
    Ok(Heatmap {
        image_id: String::new(),
        label_index,
        round_index: model.round_index(),
        raw: trace.raw,
        values: norm.values,
        degenerate: norm.degenerate,
    })
}

/// Jet-style color ramp for a value in [0, 1].
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let ramp = |x: f64| (1.5 - (4.0 * v - x).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

/// Maximum blend weight of the heatmap color over the image.
pub const OVERLAY_ALPHA: f64 = 0.5;

/// Alpha-blends the color-mapped heatmap over `image` at `display` size
/// `(rows, cols)`. The blend weight is proportional to the heatmap value, so
/// zero-valued cells leave the image untouched. Returns an RGB tensor in
/// [0, 1].
pub fn render_overlay(image: &Tensor, heatmap: &Heatmap, display: (usize, usize)) -> Result<Tensor> {
    if heatmap.values.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("heatmap values outside [0, 1]".into()));
    }
    let (rows, cols) = display;
    let base = image.resize_bilinear(rows, cols);
    let heat = heatmap.display(rows, cols);
    let mut out = Tensor::zeros(3, rows, cols);
    for y in 0..rows {
        for x in 0..cols {
            let v = heat.get(y, x);
            let alpha = OVERLAY_ALPHA * v;
            let color = colormap(v);
            for (c, &col) in color.iter().enumerate() {
                let src = if base.channels() == 1 {
                    base.get(0, y, x)
                } else {
                    base.get(c.min(base.channels() - 1), y, x)
                };
                let blended = if alpha == 0.0 {
                    src
                } else {
                    (1.0 - alpha) * src + alpha * col
                };
                out.set(c, y, x, blended);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, BackboneKind, Conv, Layer, ModelConfig, Network};
    use alloc::vec;

    #[test]
    fn normalize_small_example() {
        let raw = Grid::from_rows(&[[0.0, 1.0], [2.0, 3.0]]).unwrap();
        let n = normalize_heatmap(&raw).unwrap();
        assert!(!n.degenerate);
        let want = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, b) in n.values.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_constant_is_degenerate() {
        let n = normalize_heatmap(&Grid::from_rows(&[[5.0, 5.0]]).unwrap()).unwrap();
        assert!(n.degenerate);
        assert_eq!(n.values.data(), &[0.0, 0.0]);
    }

    #[test]
    fn normalize_rejects_nan() {
        let raw = Grid::from_rows(&[[0.0, f64::NAN]]).unwrap();
        assert!(matches!(normalize_heatmap(&raw), Err(Error::NonFinite(_))));
    }

    #[test]
    fn zero_head_row_gives_degenerate_zero_map() {
        let mut m = build_model(&ModelConfig::new(BackboneKind::SmallCnn, 2, 32), 4).unwrap();
        m.head_row_mut(1).fill(0.0);
        let img = Tensor::from_vec(3, 32, 32, (0..3 * 32 * 32).map(|i| (i % 17) as f64 / 17.0).collect()).unwrap();
        let h = grad_cam(&m, &img, 1).unwrap();
        assert!(h.degenerate);
        assert!(h.raw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn label_out_of_range() {
        let m = build_model(&ModelConfig::new(BackboneKind::SmallCnn, 2, 32), 4).unwrap();
        assert!(matches!(
            grad_cam(&m, &Tensor::zeros(3, 32, 32), 2),
            Err(Error::LabelOutOfRange { index: 2, labels: 2 })
        ));
    }

    #[test]
    fn backbone_without_conv_is_rejected() {
        let net = Network::from_layers(vec![Layer::MaxPool, Layer::Relu], 1, 1);
        let cfg = ModelConfig {
            in_channels: 1,
            ..ModelConfig::new(BackboneKind::SmallCnn, 1, 32)
        };
        let params = vec![0.5; net.param_count()];
        let m = MultiLabelModel::from_network(cfg, net, params);
        assert_eq!(grad_cam(&m, &Tensor::zeros(1, 32, 32), 0), Err(Error::NoConvLayer));
    }

    /// One 3×3 conv with a single positive centre weight, ReLU, then a head
    /// with a positive weight: Grad-CAM reduces to the ReLU'd image scaled by
    /// a positive constant, so its argmax lands on the bright patch.
    #[test]
    fn toy_model_highlights_bright_patch() {
        let mut cursor = 0;
        let conv = Conv::new(1, 1, &mut cursor);
        let net = Network::from_layers(vec![Layer::Conv(conv.clone()), Layer::Relu], 1, 1);
        let mut params = vec![0.0; net.param_count()];
        params[conv.w_off + 4] = 1.0;
        params[net.backbone_param_count()] = 2.0;
        let cfg = ModelConfig {
            in_channels: 1,
            ..ModelConfig::new(BackboneKind::SmallCnn, 1, 32)
        };
        let m = MultiLabelModel::from_network(cfg, net, params);
        let mut img = Tensor::filled(1, 32, 32, 0.1);
        for y in 20..24 {
            for x in 5..9 {
                img.set(0, y, x, 1.0);
            }
        }
        img.set(0, 21, 6, 1.2);
        let h = grad_cam(&m, &img, 0).unwrap();
        assert_eq!(h.values.argmax(), Some((21, 6)));
        assert!((h.values.max_value() - 1.0).abs() < 1e-15);
        assert_eq!(h.values.min_value(), 0.0);
    }

    fn blank_heatmap(values: Grid) -> Heatmap {
        Heatmap {
            image_id: "x".into(),
            label_index: 0,
            round_index: 0,
            raw: values.clone(),
            values,
            degenerate: false,
        }
    }

    #[test]
    fn zero_overlay_is_identity() {
        let img = Tensor::from_vec(3, 8, 8, (0..192).map(|i| (i % 9) as f64 / 9.0).collect()).unwrap();
        let h = blank_heatmap(Grid::zeros(4, 4));
        let out = render_overlay(&img, &h, (8, 8)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn overlay_has_requested_size_and_single_hotspot() {
        let img = Tensor::filled(1, 16, 16, 0.2);
        let mut g = Grid::zeros(4, 4);
        g.set(1, 2, 1.0);
        let out = render_overlay(&img, &blank_heatmap(g), (32, 48)).unwrap();
        assert_eq!((out.channels(), out.height(), out.width()), (3, 32, 48));
        let base = img.resize_bilinear(32, 48);
        let changed: Vec<(usize, usize)> = (0..32)
            .flat_map(|y| (0..48).map(move |x| (y, x)))
            .filter(|&(y, x)| (0..3).any(|c| (out.get(c, y, x) - base.get(0, y, x)).abs() > 1e-12))
            .collect();
        assert!(!changed.is_empty());
        // 4-connected flood fill from the first changed pixel reaches all of them.
        let mut seen = alloc::collections::BTreeSet::new();
        let set: alloc::collections::BTreeSet<_> = changed.iter().copied().collect();
        let mut stack = vec![changed[0]];
        while let Some((y, x)) = stack.pop() {
            if !set.contains(&(y, x)) || !seen.insert((y, x)) {
                continue;
            }
            if y > 0 {
                stack.push((y - 1, x));
            }
            if x > 0 {
                stack.push((y, x - 1));
            }
            stack.push((y + 1, x));
            stack.push((y, x + 1));
        }
        assert_eq!(seen.len(), set.len());
    }
}
