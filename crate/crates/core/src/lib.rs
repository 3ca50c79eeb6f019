//! Causal-invariant Bayesian neural networks at desk scale.
//!
//! The crate is organised bottom-up: [`autodiff`] provides the tensor tape,
//! [`nn`] the layers, [`model`] the CIB architecture and its loss,
//! [`baselines`] the comparison models, [`data`] the synthetic domain-shift
//! harness, and [`trainer`] optimisation, evaluation and sweeps.

pub mod autodiff;
mod binio;
mod error;
pub mod baselines;
pub mod data;
pub mod exec;
pub mod gradsuite;
pub mod kvfile;
pub mod model;
pub mod nn;
pub mod noise;
pub mod trainer;
pub use error::{Error, FormatError, Result};

#[cfg(test)]
mod testutil;
