//! Dense regression network (DRN) for temporal grounding of natural-language
//! queries in videos.
//!
//! Layout, bottom-up:
//! - [`tensor`], [`autodiff`], [`optim`], [`gradcheck`]: the numerical substrate.
//! - [`layers`]: convolution blocks, linear maps, BiLSTM, batch norm.
//! - [`interaction`]: query encoding, level attention and the feature pyramid.
//! - [`heads`]: regression / matching / IoU heads, targets and losses.
//! - [`model`]: the assembled network.
//! - [`train`], [`checkpoint`]: three-stage training and persistence.
//! - [`eval`]: decoding, NMS, recall metrics, best-location analysis.
//! - [`data`], [`config`], [`report`], [`ablation`]: datasets, configuration,
//!   comparison tables and ablation grids.

pub mod ablation;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heads;
pub mod interaction;
pub mod layers;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod report;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Primitive, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
