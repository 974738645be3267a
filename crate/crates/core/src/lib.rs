//! Contrastive learning of sparse features on a synthetic sparse-coding
//! distribution, with and without the RandomMask augmentation.
//!
//! The crate is organised bottom-up: [`rng`] and [`linalg`] are substrates,
//! [`data`] draws `x = M z + ξ`, [`network`] is the one-layer soft-threshold
//! encoder, [`objective`] the stop-grad contrastive loss, [`trainer`] the
//! staged SGD loop, [`eval`] the diagnostics and probes, and [`experiment`]
//! ties runs to directories on disk.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod experiment;
pub mod linalg;
pub mod network;
pub mod objective;
pub mod rng;
pub mod trainer;

pub use config::TrainConfig;
pub use data::{DataModel, Dictionary, Sample};
pub use error::{Error, Result};
pub use linalg::Mat64;
pub use network::NetworkParams;
pub use objective::Mode;
pub use rng::{SeededRng, Stream};
