//! Holdout randomization tests for conditional independence, with model
//! training schemes that maximize the risk discrepancy between original and
//! dummy features.
//!
//! The pipeline: generate or load data ([`datagen`], [`data`]), model the
//! feature law ([`sampler`]), fit a predictor ([`regression`]), compute
//! randomization p-values ([`testing`]), select features with FDR control
//! ([`selection`]), and run whole Monte Carlo studies ([`harness`]).

pub mod data;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod regression;
pub mod sampler;
pub mod seed;
pub mod selection;
pub mod testing;

pub use error::{Error, Result};
