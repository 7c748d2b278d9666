//! Deep net triage: structurally compress one convolutional block of a
//! trained network into a single layer, re-initialize and retrain it, and
//! measure how critical the block was.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod persistence;
pub mod report;
pub mod tensor;
pub mod train;
pub mod triage;

pub use error::{Error, Result};
pub use tensor::Tensor;

// The guide's Rust snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/getting-started.md")]
    mod getting_started {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/compression.md")]
    mod compression {}
    #[doc = include_str!("../../../book/src/initialization.md")]
    mod initialization {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/reports.md")]
    mod reports {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
