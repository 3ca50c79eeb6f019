use crate::autodiff::Tensor;
use crate::nn::{param_gradient_check, ParamStore};

pub(crate) fn check_all_params<F>(store: &ParamStore, loss: F, tol: f64)
where
    F: Fn(&ParamStore) -> (f64, Vec<Option<Tensor>>),
{
    let r = param_gradient_check(store, |s| Ok(loss(s)), 1e-5).unwrap();
    assert!(r.max_rel_error <= tol, "worst relative error {} at {}", r.max_rel_error, r.worst);
}
