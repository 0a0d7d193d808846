//! Multivariate forecasting with a global temporal retriever.
//!
//! A learnable `L × N` table holds one embedding per position of a global
//! cycle of length `L`. For each input window the rows matching the
//! window's absolute time steps are gathered, aligned, fused with the
//! window by a small convolution and added back as a residual, after which
//! an MLP backbone forecasts the horizon.
//!
//! Layers: [`engine`] (tensors and reverse-mode autodiff), [`data`],
//! [`gtr`], [`model`], [`train`], [`analysis`], [`synth`].

pub mod analysis;
pub mod data;
pub mod engine;
pub mod gtr;
pub mod model;
pub mod rng;
pub mod synth;
pub mod train;
