use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::OptimizerKind;
use crate::nn::{ParamKind, ParamStore};

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// SGD (with L2 weight decay folded into the gradient) or AdamW (decoupled
/// decay). Log-variances are clamped after every step and are not decayed.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub steps: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            lr,
            weight_decay,
            betas: ADAM_BETAS,
            eps: ADAM_EPS,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// `grads` is indexed by parameter index, as returned by
    /// [`crate::nn::Binder::grads`]. Every trainable parameter needs one.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        self.step_where(store, grads, |_| true)
    }

    /// [`Optimizer::step`] restricted to parameters whose path satisfies
    /// `keep`; the others are left untouched and need no gradient.
    pub fn step_where(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Tensor>],
        keep: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let ids: Vec<_> = store.ids().filter(|&id| store.kind(id).trainable() && keep(store.name(id))).collect();
        for &id in &ids {
            match grads.get(id.index()) {
                Some(Some(g)) if g.shape() == store.get(id).shape() => {}
                Some(Some(g)) => {
                    return Err(Error::Shape(format!(
                        "gradient for {} has shape {:?}, parameter {:?}",
                        store.name(id),
                        g.shape(),
                        store.get(id).shape()
                    )))
                }
                _ => return Err(Error::MissingGradient(store.name(id).to_string())),
            }
        }
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = self.betas;
        for id in ids {
            let g = grads[id.index()].as_ref().expect("checked above");
            let decay = if store.kind(id) == ParamKind::LogVar { 0.0 } else { self.weight_decay };
            match self.kind {
                OptimizerKind::Sgd => {
                    let p = store.get_mut(id).data_mut();
                    for (p, &g) in p.iter_mut().zip(g.data()) {
                        *p -= self.lr * (g + decay * *p);
                    }
                }
                OptimizerKind::AdamW => {
                    let i = id.index();
                    let m = self.first[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self.second[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                    let p = store.get_mut(id).data_mut();
                    for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                        *p -= self.lr * decay * *p;
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                    }
                }
            }
        }
        store.clamp_log_vars();
        Ok(())
    }
}
