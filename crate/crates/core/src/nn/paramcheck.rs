use super::ParamStore;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Worst central-difference disagreement over the trainable parameters.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    /// Parameter element and values at the worst disagreement.
    pub worst: String,
}

/// Central differences with step `eps` over every trainable parameter of
/// `store`. `loss` returns the loss value and the binder gradients; relative
/// errors use the same `1e-3` denominator floor as
/// [`crate::autodiff::finite_difference_check`].
pub fn param_gradient_check<F>(store: &ParamStore, loss: F, eps: f64) -> Result<ParamCheck>
where
    F: Fn(&ParamStore) -> Result<(f64, Vec<Option<Tensor>>)>,
{
    let (_, grads) = loss(store)?;
    let mut probe = store.clone();
    let mut out = ParamCheck { max_rel_error: 0.0, worst: String::new() };
    for id in store.ids() {
        if !store.kind(id).trainable() {
            continue;
        }
        let g = grads
            .get(id.index())
            .cloned()
            .flatten()
            .ok_or_else(|| Error::Shape(format!("no gradient for {}", store.name(id))))?;
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let up = loss(&probe)?.0;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let down = loss(&probe)?.0;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = g.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            if rel > out.max_rel_error {
                out.max_rel_error = rel;
                out.worst = format!("{}[{i}]: analytic {a} numeric {numeric}", store.name(id));
            }
        }
    }
    Ok(out)
}
