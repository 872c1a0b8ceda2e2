//! Inpainting of occluded surface normal maps with a convolutional GAN.
//!
//! The crate covers the whole pipeline: vector-aware augmentation
//! ([`augment`]), occlusion masks ([`masking`]), analytic training data
//! ([`synth`]), the networks and their gradients ([`model`]), losses and
//! image metrics ([`losses`]), the alternating training loop ([`trainer`])
//! and PNG dataset handling ([`data_io`]).

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod data_io;
pub mod error;
pub mod losses;
pub mod masking;
pub mod model;
pub mod normal;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use losses::{LossWeights, MetricReport, ReconstructionVariant};
pub use masking::{MaskSpec, MaskStyle};
pub use normal::{ImageTensor, NormalMap, OcclusionMask, Rgb8Image, Vec3, BACKGROUND};
pub use trainer::{TrainConfig, Trainer};
