//! Region-adaptive learned image codec.
//!
//! The pipeline: analysis transform with scale-affine sample blocks and a
//! region-adaptive transform (RAT) conditioned on per-region prototypes,
//! a hyperprior entropy model whose Gaussian parameters are refined by a
//! second RAT, and a bit-exact range coder. Region maps (segmentation masks
//! or grid partitions) steer the prototypes; at inference a grid replaces
//! masks so no side information is sent for them.

pub mod cli;
pub mod entropy;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod net;
pub mod netpbm;
pub mod nn;
pub mod rat;
pub mod region;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
