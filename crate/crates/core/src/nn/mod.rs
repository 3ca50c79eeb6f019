//! Layers: point-estimate linear and convolution layers, batch
//! normalisation with separate i.i.d and o.o.d evaluation modes, and
//! mean-field Gaussian layers sampled with the reparameterisation trick.

mod batchnorm;
mod bayes;
mod layers;
mod paramcheck;
mod params;

pub use batchnorm::{BatchNorm, BnMode};
pub use bayes::{kl_by_quadrature, kl_to_standard_normal, sample_gaussian, BayesDraw, BayesianLinear, GaussianVariational, INIT_LOG_VAR};
pub use layers::{Conv2d, Linear};
pub use paramcheck::{param_gradient_check, ParamCheck};
pub use params::{
    apply_buffer_updates, Binder, Checkpoint, ParamId, ParamKind, ParamStore, LOG_VAR_MAX, LOG_VAR_MIN,
};
