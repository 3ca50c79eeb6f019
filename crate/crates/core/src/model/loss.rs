use super::cib::CibOutput;
use super::config::{ExperimentConfig, MAX_WEIGHT_SAMPLES};
use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

/// Probability floor inside the cross-entropy logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Soft target `α·y + (1−α)·mean_i(y_i)`.
///
/// `context_labels` is either `[N, K]` (one context set shared by the batch)
/// or `[B, N, K]`.
pub fn mix_labels(labels: &Tensor, context_labels: &Tensor, alpha: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha: must lie in [0, 1], got {alpha}")));
    }
    let (b, k) = match labels.shape() {
        [b, k] => (*b, *k),
        s => return Err(Error::Shape(format!("labels must be [batch, classes], got {s:?}"))),
    };
    let (shared, n) = match *context_labels.shape() {
        [n, kk] if kk == k => (true, n),
        [bb, n, kk] if bb == b && kk == k => (false, n),
        ref s => return Err(Error::Shape(format!("context labels {s:?} do not match labels [{b}, {k}]"))),
    };
    let c = context_labels.data();
    let y = labels.data();
    Ok(Tensor::from_fn(&[b, k], |idx| {
        let (row, class) = (idx / k, idx % k);
        let base = if shared { 0 } else { row * n * k };
        let ctx_mean = (0..n).map(|i| c[base + i * k + class]).sum::<f64>() / n as f64;
        alpha * y[idx] + (1.0 - alpha) * ctx_mean
    }))
}

/// `Σ_{j<k} ‖P_j − P_k‖²` over the per-weight-sample outputs, summed over
/// batch and classes.
pub fn weight_func_reg<'t>(per_weight: &[Var<'t>]) -> Result<Var<'t>> {
    let first = per_weight.first().ok_or_else(|| Error::Config("m: no weight samples".into()))?;
    if per_weight.len() > MAX_WEIGHT_SAMPLES {
        return Err(Error::Config(format!(
            "m: at most {MAX_WEIGHT_SAMPLES} weight samples are supported, got {}",
            per_weight.len()
        )));
    }
    let mut total = first.tape().constant(Tensor::scalar(0.0))?;
    for j in 0..per_weight.len() {
        for k in j + 1..per_weight.len() {
            total = total.add(per_weight[j].sub(per_weight[k])?.square()?.sum()?)?;
        }
    }
    Ok(total)
}

/// `−(1/B) Σ_b Σ_k labels·log(max(probs, 1e-12))`, plus the number of
/// entries with label mass whose probability hit the floor.
pub fn probs_cross_entropy<'t>(probs: Var<'t>, labels: &Tensor) -> Result<(Var<'t>, usize)> {
    let p = probs.value();
    if p.shape() != labels.shape() || p.ndim() != 2 {
        return Err(Error::Shape(format!("probs {:?} vs labels {:?}", p.shape(), labels.shape())));
    }
    let clamped = p.data().iter().zip(labels.data()).filter(|(p, y)| **p < PROB_FLOOR && **y > 0.0).count();
    let y = probs.tape().constant(labels.clone())?;
    let b = p.shape()[0] as f64;
    let ce = probs.clamp(PROB_FLOOR, f64::INFINITY)?.log()?.mul(y)?.sum()?.scale(-1.0 / b)?;
    Ok((ce, clamped))
}

/// Loss components of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub weight_func: f64,
    pub kl_input_repr: f64,
    pub kl_context_repr: f64,
    pub kl_weights: f64,
    pub total: f64,
    /// Probabilities that hit the log floor.
    pub clamped: usize,
}

impl LossBreakdown {
    /// The weighted sum, accumulated in the same order as the tape.
    pub fn recombine(&self, cfg: &ExperimentConfig) -> f64 {
        self.cross_entropy
            + cfg.beta * self.weight_func
            + cfg.gamma * self.kl_input_repr
            + cfg.mu_c * self.kl_context_repr
            + cfg.epsilon * self.kl_weights
    }
}

/// `CE + β·wf + γ·kl_in + μ_c·kl_ctx + ε·kl_w`.
pub fn total_loss<'t>(out: &CibOutput<'t>, mixed_labels: &Tensor, cfg: &ExperimentConfig) -> Result<(Var<'t>, LossBreakdown)> {
    let (ce, clamped) = probs_cross_entropy(out.probs, mixed_labels)?;
    let wf = weight_func_reg(&out.per_weight)?;
    let total = ce
        .add(wf.scale(cfg.beta)?)?
        .add(out.kl_input.scale(cfg.gamma)?)?
        .add(out.kl_context.scale(cfg.mu_c)?)?
        .add(out.kl_weights.scale(cfg.epsilon)?)?;
    let breakdown = LossBreakdown {
        cross_entropy: ce.item(),
        weight_func: wf.item(),
        kl_input_repr: out.kl_input.item(),
        kl_context_repr: out.kl_context.item(),
        kl_weights: out.kl_weights.item(),
        total: total.item(),
        clamped,
    };
    Ok((total, breakdown))
}
