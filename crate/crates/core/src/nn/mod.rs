//! Multi-label CNN: backbones, the sigmoid head and the Adam optimizer.

mod adam;
mod layers;
mod model;

pub use adam::Adam;
pub use model::{
    build_model, build_model_with_backbone_weights, predict, BackboneKind, Forward, ModelConfig, ModelSnapshot,
    MultiLabelModel, Network, PredictionVector,
};

#[cfg(test)]
pub(crate) use layers::Conv;
#[cfg(test)]
pub(crate) use model::Layer;
