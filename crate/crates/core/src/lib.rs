//! Score-based out-of-distribution detection with a diffusion noise predictor.
//!
//! A sample is encoded with a few deterministic DDIM steps; the predicted
//! noise along that short trajectory is summarized into magnitude and
//! curvature terms, and a KDE over in-distribution scores turns them into an
//! OOD score.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod optim;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod sbdt;
pub mod score_net;
pub mod scoring;
pub mod tensor;

pub use diffusion::{EpsModel, NoiseSchedule, Trajectory};
pub use error::{Error, Result};
pub use sbdt::{SbdtError, TensorBundle};
pub use score_net::{ScoreModel, TrainConfig};
pub use tensor::Tensor;
