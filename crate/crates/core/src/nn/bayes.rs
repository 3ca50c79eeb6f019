use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Binder, ParamId, ParamKind, ParamStore};
use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::noise::NoiseSource;

/// Initial log-variance of Bayesian weights (σ ≈ 0.05).
pub const INIT_LOG_VAR: f64 = -6.0;

/// `mean + exp(½·log_var) ⊙ noise`.
pub fn sample_gaussian<'t>(mean: Var<'t>, log_var: Var<'t>, noise: &Tensor) -> Result<Var<'t>> {
    if mean.shape() != noise.shape() || mean.shape() != log_var.shape() {
        return Err(Error::Shape(format!(
            "gaussian sample: mean {:?}, log_var {:?}, noise {:?}",
            mean.shape(),
            log_var.shape(),
            noise.shape()
        )));
    }
    let eps = mean.tape().constant(noise.clone())?;
    Ok(mean.add(log_var.scale(0.5)?.exp()?.mul(eps)?)?)
}

/// `KL(N(mean, exp(log_var)) ‖ N(0, 1))` summed over all elements:
/// `Σ ½(mean² + var − log_var − 1)`.
pub fn kl_to_standard_normal<'t>(mean: Var<'t>, log_var: Var<'t>) -> Result<Var<'t>> {
    if mean.shape() != log_var.shape() {
        return Err(Error::Shape(format!("kl: mean {:?} vs log_var {:?}", mean.shape(), log_var.shape())));
    }
    let terms = mean.square()?.add(log_var.exp()?)?.sub(log_var)?.add_scalar(-1.0)?;
    Ok(terms.sum()?.scale(0.5)?)
}

/// `KL(N(mean, exp(log_var)) ‖ N(0, 1))` for one scalar Gaussian by the
/// trapezoid rule over `mean ± 12σ` with `steps` intervals. Independent of
/// the closed form, for checking it.
pub fn kl_by_quadrature(mean: f64, log_var: f64, steps: usize) -> f64 {
    let sd = (0.5 * log_var).exp();
    let (lo, hi) = (mean - 12.0 * sd, mean + 12.0 * sd);
    let h = (hi - lo) / steps as f64;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let f = |x: f64| {
        let z = (x - mean) / sd;
        let log_q = -0.5 * (z * z + ln_2pi + log_var);
        let log_p = -0.5 * (x * x + ln_2pi);
        log_q.exp() * (log_q - log_p)
    };
    let inner: f64 = (1..steps).map(|i| f(lo + i as f64 * h)).sum();
    h * (inner + 0.5 * (f(lo) + f(hi)))
}

/// Diagonal Gaussian over a parameter tensor with a standard-normal prior.
#[derive(Debug, Clone)]
pub struct GaussianVariational {
    pub mean: ParamId,
    pub log_var: ParamId,
    pub shape: Vec<usize>,
}

impl GaussianVariational {
    /// Means from `N(0, 1)`, log-variances at [`INIT_LOG_VAR`].
    pub fn new(store: &mut ParamStore, path: &str, shape: &[usize], rng: &mut impl Rng) -> Self {
        let mean = Tensor::from_fn(shape, |_| StandardNormal.sample(rng));
        GaussianVariational {
            mean: store.add(format!("{path}.mean"), ParamKind::Weight, mean),
            log_var: store.add(format!("{path}.log_var"), ParamKind::LogVar, Tensor::full(shape, INIT_LOG_VAR)),
            shape: shape.to_vec(),
        }
    }

    pub fn sample<'t>(&self, b: &mut Binder<'t, '_>, noise: &Tensor) -> Result<Var<'t>> {
        let (m, lv) = (b.var(self.mean)?, b.var(self.log_var)?);
        sample_gaussian(m, lv, noise)
    }

    pub fn kl<'t>(&self, b: &mut Binder<'t, '_>) -> Result<Var<'t>> {
        let (m, lv) = (b.var(self.mean)?, b.var(self.log_var)?);
        kl_to_standard_normal(m, lv)
    }
}

/// Mean-field Gaussian affine layer.
#[derive(Debug, Clone)]
pub struct BayesianLinear {
    pub weight: GaussianVariational,
    pub bias: GaussianVariational,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// One realisation of a [`BayesianLinear`]'s weights.
#[derive(Debug, Clone, Copy)]
pub struct BayesDraw<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl BayesianLinear {
    pub fn new(store: &mut ParamStore, path: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        BayesianLinear {
            weight: GaussianVariational::new(store, &format!("{path}.weight"), &[out_dim, in_dim], rng),
            bias: GaussianVariational::new(store, &format!("{path}.bias"), &[out_dim], rng),
            in_dim,
            out_dim,
        }
    }

    /// Samples one weight and bias realisation.
    pub fn draw<'t>(&self, b: &mut Binder<'t, '_>, noise: &mut dyn NoiseSource) -> Result<BayesDraw<'t>> {
        let wn = noise.standard_normal(&[self.out_dim, self.in_dim]);
        let bn = noise.standard_normal(&[self.out_dim]);
        Ok(BayesDraw { weight: self.weight.sample(b, &wn)?, bias: self.bias.sample(b, &bn)? })
    }

    /// The posterior means as a draw.
    pub fn mean_draw<'t>(&self, b: &mut Binder<'t, '_>) -> Result<BayesDraw<'t>> {
        Ok(BayesDraw { weight: b.var(self.weight.mean)?, bias: b.var(self.bias.mean)? })
    }

    pub fn apply<'t>(&self, draw: &BayesDraw<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::Shape(format!("bayesian linear expects [batch, {}], got {shape:?}", self.in_dim)));
        }
        Ok(x.matmul(draw.weight.transpose()?)?.add(draw.bias)?)
    }

    /// Draws fresh weights and applies them.
    pub fn forward<'t>(&self, b: &mut Binder<'t, '_>, x: Var<'t>, noise: &mut dyn NoiseSource) -> Result<Var<'t>> {
        let draw = self.draw(b, noise)?;
        self.apply(&draw, x)
    }

    pub fn kl<'t>(&self, b: &mut Binder<'t, '_>) -> Result<Var<'t>> {
        Ok(self.weight.kl(b)?.add(self.bias.kl(b)?)?)
    }
}
