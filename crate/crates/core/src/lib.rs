//! Toolkit for training multi-task and multi-domain models with scalarized
//! (weighted-average) objectives.
//!
//! - [`nn`]: multi-head MLP with exact backprop, losses, optimizers.
//! - [`data`]: multi-source datasets, synthetic generators, CSV ingestion and
//!   the mixture resampling sampler.
//! - [`weighting`]: simplex weight vectors, scalarized steps and the
//!   loss-based adaptive baselines (uncertainty weighting, IMTL-L).
//! - [`grad_mto`]: per-task gradients, PCGrad, GradDrop, CAGrad.
//! - [`conflict`]: gradient-conflict profiling and aggregation.
//! - [`train`]: the training session shared by every workflow.
//! - [`pbt`]: population-based search over scalarization weights.
//! - [`experiment`]: baselines, sweeps, reports and cost accounting.

pub mod conflict;
pub mod data;
pub mod error;
pub mod experiment;
pub mod grad_mto;
pub mod nn;
pub mod pbt;
pub mod rng;
pub mod train;
pub mod weighting;

pub use error::{Error, Result};
