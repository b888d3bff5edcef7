//! Single-image deraining with a kernel prediction network.
//!
//! A UNet-style network predicts a `K x K` kernel for every pixel. The rainy
//! image is filtered with those kernels at several dilation factors and the
//! per-scale results are fused by a learned 3x3 convolution. Training uses
//! an `L1 - lambda * SSIM` objective and optional RainMix augmentation.

pub mod error;
pub mod filtering;
pub mod image_io;
pub mod kpn;
pub mod loss;
pub mod pipeline;
pub mod rainmix;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use filtering::{DilationFactors, FusionParams, KernelField};
pub use kpn::{KpnConfig, KpnGrads, KpnParams};
pub use loss::{LossConfig, SsimConfig};
pub use pipeline::{Checkpoint, Dataset, TrainConfig, Variant};
pub use rainmix::{RainMap, RainMixConfig, RainStreakSet};
pub use rng::{PinnedRng, RngState};
pub use tensor::{AdamConfig, AdamState, ConvLayerParams, Tensor};
