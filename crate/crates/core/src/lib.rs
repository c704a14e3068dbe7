//! Listwise view ranking for image cropping.
//!
//! The crate bundles everything needed to rank candidate crop views of an
//! image by composition quality:
//!
//! - [`tensor`]: a minimal dense-tensor substrate (bilinear sampling,
//!   upsampling, finite-difference gradient checks).
//! - [`roi`]: four RoI feature-sampling kernels (pool / align / warp /
//!   refine) with forward and backward passes.
//! - [`ranking`]: the listwise Top-1 cross-entropy loss, a brute-force
//!   permutation oracle validating its closed form, and a pairwise hinge
//!   baseline.
//! - [`views`]: sliding-window candidate generation, NMS, and cropping
//!   metrics (IoU, boundary displacement).
//! - [`pipeline`]: a desk-scale training pipeline on synthetic data used to
//!   compare ranking losses and RoI kernels.
//! - [`container`] / [`ppm`]: the on-disk formats used by the CLI.

pub mod bbox;
pub mod container;
pub mod error;
pub mod pipeline;
pub mod ppm;
pub mod ranking;
pub mod roi;
pub mod tensor;
pub mod views;

pub use bbox::BBox;
pub use error::{Error, Result};
pub use tensor::{FeatureMap, GradMap};
