//! Dual-view residual backbone and the global point-wise classifier.
//!
//! The first `shared_depth` residual blocks form a trunk shared by both views;
//! the remaining blocks are duplicated per view. Global average pooling is
//! omitted, so each view emits a `[batch, h, w, m]` feature map.

mod classifier;
mod layers;
mod network;
mod params;

pub use classifier::{classify_pointwise, classify_pointwise_backward, flatten_features, GlobalClassifier};
pub use network::{
    parameter_count, BackboneConfig, BmlNetwork, DualViewFeatures, TrainCache, TrainForward, ViewMask,
    DESK_CHANNELS, MIN_INPUT_SIZE, NUM_BLOCKS, RESNET12_CHANNELS,
};
pub use params::{Gradients, NamedTensor, ParamStore};
