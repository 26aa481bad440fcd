//! Action-aware diffusion for procedure planning.
//!
//! Given visual features of the first and last state of a task, the planner
//! predicts the intermediate action sequence by running a conditioned
//! denoising diffusion process over a plan matrix. The crate provides the
//! tensor/autodiff engine, the noise schedule and action-aware forward
//! process, a 1-D denoiser over the horizon axis, synthetic dataset tooling,
//! evaluation metrics, and the `procdiff` CLI on top.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod metrics;
pub mod noise;
pub mod optim;
pub mod plan;
pub mod planner;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
