//! Low-complexity CNN toolkit for audio scene classification on
//! microcontroller-class budgets.
//!
//! The pipeline: extract 40x51 log-mel features from 1-second clips, train a
//! three-conv CNN, prune filter pairs that are redundant under cosine
//! similarity, quantize parameters to INT8, aggregate pruned variants into
//! an ensemble, and deduplicate feature maps that several members compute
//! identically. A complexity calculator accounts for every parameter and
//! multiply-accumulate so models can be gated against deployment limits
//! (128K parameters / 30M MACs by default).

pub mod adam;
pub mod complexity;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod features;
pub mod io;
pub mod nn;
pub mod pruning;
pub mod quant;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
