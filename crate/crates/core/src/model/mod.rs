//! Toy dilated fully convolutional segmentation network.
//!
//! The network is a stack of 3×3 convolutions (with rectifiers and optional
//! average pooling after each), a 1×1 scoring convolution, and a bilinear
//! upsampling back to input resolution. Gradients are hand-written per layer.

pub mod layers;
mod loss;
mod net;
mod types;

pub use loss::{predict, seg_loss, softmax, SegLoss};
pub use net::{
    backward, forward_features, forward_scores, forward_trace, ArchConfig, ForwardTrace,
    ModelParams,
};
pub use types::{FeatureMap, Image, LabelMap, ScoreMap};
