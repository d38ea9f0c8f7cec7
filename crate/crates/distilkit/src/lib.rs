//! distilkit: a desk-scale knowledge-distillation toolkit.
//!
//! The crate trains a toy transformer teacher with a masked
//! cluster-prediction objective over k-means pseudo-labels, distills it
//! into a bidirectional-LSTM student using logit-level KD or decoupled KD,
//! and profiles memory/compute/latency scaling against utterance length.

pub mod cli;
pub mod distillpipe;
pub mod error;
pub mod guide;
pub mod losses;
pub mod models;
pub mod numerics;
pub mod profiler;
pub mod speechdata;
pub mod verify;

pub use error::{Error, Result};
