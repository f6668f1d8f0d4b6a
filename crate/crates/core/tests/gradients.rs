//! Analytic gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refocus_core::loss::{joint_loss, joint_loss_and_grad, LabelMask, LossWeights};
use refocus_core::nn::{build_model, BackboneKind, ModelConfig, MultiLabelModel};
use refocus_core::{Grid, Tensor};

const COORDS: usize = 120;
const STEP: f64 = 1e-5;

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    let data = (0..3 * size * size).map(|_| rng.random::<f64>()).collect();
    Tensor::from_vec(3, size, size, data).unwrap()
}

/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over sampled coordinates.
fn relative_error(model: &MultiLabelModel, image: &Tensor, truth: &[f64], masks: &[LabelMask], weights: &LossWeights, seed: u64) -> f64 {
    let (_, analytic) = joint_loss_and_grad(model, image, truth, masks, weights).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for _ in 0..COORDS {
        let i = rng.random_range(0..model.param_count());
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + STEP;
        let up = joint_loss(&probe, image, truth, masks, weights).unwrap();
        probe.params_mut()[i] = orig - STEP;
        let down = joint_loss(&probe, image, truth, masks, weights).unwrap();
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        diff += (analytic[i] - numeric).powi(2);
        na += analytic[i].powi(2);
        nn += numeric.powi(2);
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-300)
}

fn setup(seed: u64) -> (MultiLabelModel, Tensor) {
    let model = build_model(&ModelConfig::new(BackboneKind::SmallCnn, 2, 32), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    (model, random_image(&mut rng, 32))
}

#[test]
fn prediction_loss_gradient_matches_finite_differences() {
    let (model, image) = setup(1);
    let weights = LossWeights::uniform(2, 1.0);
    let err = relative_error(&model, &image, &[1.0, 0.0], &[], &weights, 11);
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn attention_loss_gradient_matches_finite_differences() {
    let (model, image) = setup(2);
    let (rows, cols) = model.heatmap_shape();
    let mut mask = Grid::zeros(rows, cols);
    for r in 1..4 {
        for c in 2..6 {
            mask.set(r, c, 1.0);
        }
    }
    let masks = [LabelMask {
        label: 0,
        mask,
        correction: false,
    }];
    let weights = LossWeights::uniform(2, 1.0);
    let err = relative_error(&model, &image, &[1.0, 1.0], &masks, &weights, 12);
    assert!(err < 1e-2, "relative error {err}");
}
