//! A desk-scale laboratory for adapting small Vision Transformers: linear and
//! MLP heads, partial and bias-only tuning, side networks, bottleneck
//! adapters, visual prompts, and plain or gated mixtures of two expert
//! backbones, plus the metrics, accounting and data splits to compare them.

// `!(x >= 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod backbone;
pub mod datahub;
pub mod error;
pub mod gmoe;
pub mod numcore;
pub mod trainlab;

pub use error::{Error, Result};
