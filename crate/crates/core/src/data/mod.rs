//! Patches, preprocessing, augmentation, synthetic data and splits.

pub mod augment;
pub mod dataset;
pub mod patch;
pub mod preprocess;
pub mod split;
pub mod synth;
