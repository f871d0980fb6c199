//! Point-wise cross-layer attention for feature hierarchies: a small
//! CPU-only tensor core, reverse-mode tape, the fusion block itself, a toy
//! segmentation backbone, synthetic defect data, and a training/ablation
//! harness around them.

pub mod backbone;
pub mod block;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod kernels;
pub mod optim;
pub mod reference;
pub mod report;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use block::{BlockParams, CorrelationKind, CrossFusionConfig, FeatureHierarchy};
pub use error::{CoreError, Result};
pub use tape::{Tape, ValueId};
pub use tensor::{Scalar, Tensor};
