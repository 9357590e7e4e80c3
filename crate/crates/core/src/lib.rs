//! Context-aware probabilistic forecasting for multimodal (numeric + text)
//! time series.
//!
//! The pipeline patches an instance-normalized lookback window, encodes the
//! patches with a pretrained mixer encoder, distills exogenous text into
//! per-position abstraction vectors via learnable-query cross-attention,
//! fuses both streams, runs them through a frozen causal transformer and
//! decodes each position with a text-gated sparse mixture of Student-t
//! heads. Forecasts beyond one patch are produced autoregressively.
//!
//! Modules are layered bottom-up: [`diffnum`] is the scalar/tensor autodiff
//! substrate, [`series_prep`] and [`text_embed`] prepare the two input
//! modalities, [`ts_encoder`], [`backbone`], [`abstraction`] and
//! [`mixture_decoder`] form the model, [`trainer`] and [`inference`] drive
//! it, and [`data_io`] / [`metrics`] handle corpora and evaluation.

pub mod abstraction;
pub mod backbone;
pub mod config;
pub mod container;
pub mod data_io;
pub mod diffnum;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod mixture_decoder;
pub mod model;
pub mod nn;
pub mod series_prep;
pub mod text_embed;
pub mod trainer;
pub mod ts_encoder;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
