//! Fully residual encoder-decoder network for membrane segmentation of
//! electron-microscopy sections.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`]: rank-4 tensors, the recording tape, Adam and initialization.
//! * [`architecture`]: the encoder/bridge/decoder topology with summation skips.
//! * [`augment`]: dihedral enrichment, elastic warps, noise, mirror padding
//!   and test-time averaging.
//! * [`metrics`]: foreground-restricted Rand and information F-scores, Dice,
//!   median filtering and connected components.
//! * [`pipeline`]: datasets, training, cross-validation, checkpoints and
//!   prediction.
//! * [`api`]: request and response bodies of the HTTP service.

pub mod api;
pub mod architecture;
pub mod augment;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod metrics;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
