//! Multi-company stock-trend forecasting built on a hand-rolled
//! reverse-mode autodiff core.
//!
//! The model encodes each company's recent feature window with a recurrent
//! cell (GRU or LSTM), scores pairwise company relations with two attention
//! mechanisms (a GAT-style learned scorer and an AGNN-style scaled cosine
//! scorer), fuses the two attention views into per-company relation vectors,
//! and predicts next-day returns (regression) or their sign
//! (classification) with a single-layer head.
//!
//! Layers, bottom to top:
//! - [`tensor`] / [`tape`]: dense f64 matrices and the autodiff engine.
//! - [`recurrent`]: GRU/LSTM encoders.
//! - [`relation`]: attention scorers, masked normalization, fusion.
//! - [`model`]: the six trainable variants, checkpointing.
//! - [`data`]: OHLCV ingestion, windowing, splits, synthetic generation.
//! - [`training`]: losses, Adam, the training loop, evaluation metrics.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod metrics;
pub mod model;
pub mod recurrent;
pub mod relation;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Activation, ParamId, ParamStore, Parameter, Tape, Var};
pub use tensor::Tensor;
