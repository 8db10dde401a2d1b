//! Desk-scale toolkit for measuring how post-hoc confidence calibration of
//! an image classifier changes the saliency maps produced by local
//! interpretation methods.
//!
//! The crate bundles a small f32 tensor engine with reverse-mode autodiff,
//! a trainable toy CNN runtime, post-hoc calibrators (temperature scaling
//! and Dirichlet maps) with calibration-error estimators, five saliency
//! methods, the evaluation metrics (SSIM, deletion curves with a SLIC
//! random baseline, Otsu-binarized total variation, Lipschitz stability),
//! and a deterministic experiment harness with CSV/SVG reporting.

pub mod autodiff;
pub mod calibration;
pub mod dataset;
pub mod ece;
pub mod error;
pub mod layers;
pub mod model;
pub mod model_io;
pub mod opt;
pub mod reference;
pub mod rng;
pub mod saliency;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
