//! Permuted-order prophet decoding on a small transformer encoder-decoder.
//!
//! The decoder is trained under sampled target orders with `N` query streams,
//! stream `n` predicting each token while skipping the `n - 1` most recently
//! decoded ones. Inference is plain left-to-right beam search. The `oracle`
//! and `selfcheck` modules hold brute-force reference implementations that
//! the tests and the `selfcheck` command compare against.

pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod order;
pub mod selfcheck;
pub mod training;

pub use error::{Error, Result};
