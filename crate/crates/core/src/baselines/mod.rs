//! Comparison models: a point-estimate classifier sharing the CIB encoder,
//! and the causal-transportability (CT) model built on a variational
//! autoencoder.

mod ct;
mod point;

pub use ct::{ct_forward, ct_loss, CtBreakdown, CtModel, CtOutput, CtWeights};
pub use point::{collapse_discrepancy, pointwise_forward, PointModel};
