//! Hand keypoint localization on the CPU.
//!
//! * [`tensor`]: NHWC tensors and the conv / depthwise / transposed-conv kernels.
//! * [`netgraph`]: the MobileNetV2-based encoder-decoder, its forward pass and budget audit.
//! * [`heatmap`]: Gaussian targets, background plane, argmax decoding with peak fallback.
//! * [`metrics`]: EPE, PCK / PCKh, AUC, root alignment.
//! * [`dataset`]: annotations, crops, mirroring, augmentation, training targets.
//! * [`weights`]: the HKWF archive format and weight binding.

pub mod dataset;
pub mod error;
pub mod heatmap;
pub mod metrics;
pub mod netgraph;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use heatmap::{DecodeParams, Heatmaps, Keypoint, KeypointSet, NUM_KEYPOINTS, NUM_PLANES};
pub use netgraph::{build_network, Network, NetworkConfig};
pub use tensor::{Exec, Shape, Tensor};
pub use weights::{bind_weights, WeightArchive};
