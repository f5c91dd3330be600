//! A small CPU neural-network engine: just enough layers for desk-scale
//! convolutional classifiers, with exact reverse-mode gradients.

pub mod layers;
pub mod scalar;

pub use layers::{Act, BackboneSpec, Conv2d, FeatureExtractor, Layer, Sequential, SequentialTrace, Shape};
pub use scalar::{gemm, MatRef, Real};
