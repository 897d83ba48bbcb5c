//! Spatiotemporal EV charging load forecasting.
//!
//! Per-station load windows are instance-normalized and cut into patches,
//! reprogrammed by cross-attention onto a frozen token-embedding table, mixed
//! across stations by a two-layer GCN over a correlation graph, prefixed with
//! a natural-language prompt and pushed through a frozen transformer. Only
//! the adapters (patch embedding, reprogramming heads, GCN, weather embedding
//! and the output head) are trained.

pub mod error;
pub mod backbone;
pub mod data;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod prompt;
pub mod reprogram;
pub mod train;

pub use error::{Error, Result};
