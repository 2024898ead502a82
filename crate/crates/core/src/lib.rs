//! Data-dependent token routing for grid-structured vision transformers.
//!
//! The network is a grid of response maps: each level holds tokens at one
//! resolution, each column is one step of depth. Per-token binary gates pick
//! between a transformer stage and an identity mapping along a level, and a
//! per-map gate decides whether to downsample into the next level. Training
//! adds a differentiable FLOPs-budget penalty to the task loss.
//!
//! Module map:
//! - [`tensor`], [`autodiff`], [`gradcheck`]: the numeric substrate.
//! - [`gates`]: routing gates, hard Gumbel-Softmax, momentum weights.
//! - [`grid`]: grid configuration, parameters, transformer blocks, forward sweep.
//! - [`cost`]: analytic FLOPs, per-stage cost, budget loss, counted-MAC oracle.
//! - [`data`], [`optim`], [`train`]: synthetic dataset, AdamW, training and evaluation.
//! - [`config`], [`checkpoint`], [`report`]: run configuration, checkpoints, CSV/PGM output.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod gates;
pub mod gradcheck;
pub mod grid;
pub mod optim;
pub mod params;
pub mod report;
pub mod tensor;
pub mod train;

pub use autodiff::{BinaryOp, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
