//! Dense-correspondence learning lab.
//!
//! The crate is organised around the pieces needed to study how much manual
//! annotation a dense body-surface predictor needs when motion is available:
//!
//! * [`field`]: dense correspondence fields (backward maps), warps, flow
//!   integration, inversion and forward-backward consistency filtering.
//! * [`surface`]: a welded multi-chart puppet surface with graph geodesics and
//!   the ratio-within-threshold metric.
//! * [`synth`]: an articulated 2D puppet renderer with exact UV, flow and
//!   keypoint ground truth, flow corruption and annotation-reduction schemes.
//! * [`predictor`]: a small multi-stage convolutional UV predictor with
//!   hand-written reverse-mode gradients, supervised / keypoint / equivariance
//!   losses, ground-truth propagation and the training loop.
//! * [`harness`]: experiment specs, ablation grids and reports.
//! * [`container`] and [`config`]: persistence formats.

pub mod config;
pub mod container;
pub mod error;
pub mod field;
pub mod harness;
pub mod predictor;
pub mod rng;
pub mod surface;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
