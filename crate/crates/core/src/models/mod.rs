//! Fusion and segmentation networks.

pub mod fusion;
pub mod seg;

pub use fusion::{
    CrossAttention, Discriminator, Discriminators, FeaturePair, FusedImage, FusedVars, FusionConfig, FusionModel,
};
pub use seg::{predict_mask, SegConfig, SegModel, SegOutput, SegVars, NUM_CLASSES};
