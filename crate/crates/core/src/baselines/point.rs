use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{cib_forward, CibModel, Encoder, ExperimentConfig, InputShape};
use crate::nn::{Binder, BnMode, Linear, ParamStore};
use crate::noise::{substream, NoiseStreams, Stream};

/// Deterministic classifier: the CIB encoder's mean fed to a point MLP.
#[derive(Debug, Clone)]
pub struct PointModel {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub head: [Linear; 3],
    pub classes: usize,
}

impl PointModel {
    pub fn new(cfg: &ExperimentConfig, input: InputShape, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("classes: need at least 2, got {classes}")));
        }
        let rng = &mut substream(cfg.seed, Stream::Init);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, "encoder", cfg.encoder_kind, input, cfg.encoder_hidden, cfg.repr_dim, rng)?;
        let head = [
            Linear::new(&mut store, "head.fc1", cfg.repr_dim, cfg.hidden, rng),
            Linear::new(&mut store, "head.fc2", cfg.hidden, cfg.hidden, rng),
            Linear::new(&mut store, "head.fc3", cfg.hidden, classes, rng),
        ];
        Ok(PointModel { store, encoder, head, classes })
    }

    /// The point network that a CIB model reduces to when every variance
    /// sits at its floor and each input is its own single context: the
    /// encoder mean is doubled (`r + r' = 2μ`) and the head takes the
    /// Bayesian layers' means.
    pub fn from_collapsed_cib(cib: &CibModel, cfg: &ExperimentConfig) -> Result<Self> {
        let mut p = PointModel::new(cfg, cib.encoder.input, cib.classes)?;
        p.store.load_from_matching(&cib.store, "encoder.")?;
        let d = cib.encoder.repr_dim;
        let head = &p.encoder.head;
        let width = p.store.get(head.weight).shape()[1];
        p.store.get_mut(head.weight).data_mut()[..d * width].iter_mut().for_each(|v| *v *= 2.0);
        p.store.get_mut(head.bias).data_mut()[..d].iter_mut().for_each(|v| *v *= 2.0);
        let net = &cib.net;
        let pairs = [
            (p.head[0].weight, net.first.weight.mean),
            (p.head[0].bias, net.first.bias.mean),
            (p.head[1].weight, net.hidden.weight),
            (p.head[1].bias, net.hidden.bias),
            (p.head[2].weight, net.last.weight.mean),
            (p.head[2].bias, net.last.bias.mean),
        ];
        for (dst, src) in pairs {
            p.store.set(dst, cib.store.get(src).clone())?;
        }
        Ok(p)
    }
}

/// Returns `(probs, logits)`.
pub fn pointwise_forward<'t>(
    model: &PointModel,
    b: &mut Binder<'t, '_>,
    inputs: &Tensor,
    mode: BnMode,
) -> Result<(Var<'t>, Var<'t>)> {
    let x = b.constant(inputs.clone())?;
    let (mean, _) = model.encoder.forward(b, x, mode)?;
    let h = model.head[0].forward(b, mean)?.silu()?;
    let h = model.head[1].forward(b, h)?.silu()?;
    let logits = model.head[2].forward(b, h)?;
    Ok((logits.softmax()?, logits))
}

/// Largest absolute probability difference between a collapsed CIB model
/// (N=1, each input its own context, fresh noise per input) and the point
/// network built from it by [`PointModel::from_collapsed_cib`].
pub fn collapse_discrepancy(
    cib: &CibModel,
    cfg: &ExperimentConfig,
    inputs: &Tensor,
    mode: BnMode,
    noise: &mut NoiseStreams<'_>,
) -> Result<f64> {
    if cfg.n != 1 || cfg.m != 1 {
        return Err(Error::Config(format!("collapse comparison needs n = m = 1, got n = {}, m = {}", cfg.n, cfg.m)));
    }
    let point = PointModel::from_collapsed_cib(cib, cfg)?;
    let tape = Tape::new();
    let mut b = Binder::new(&tape, &point.store);
    let expected = pointwise_forward(&point, &mut b, inputs, mode)?.0.value();
    let mut worst: f64 = 0.0;
    for i in 0..inputs.shape()[0] {
        let xi = inputs.select_rows(&[i])?;
        let tape = Tape::new();
        let mut b = Binder::new(&tape, &cib.store);
        let p = cib_forward(cib, &mut b, &xi, &xi, mode, cfg, noise)?.probs.value();
        let q = Tensor::new(&[1, cib.classes], expected.row(i).to_vec())?;
        worst = worst.max(p.max_abs_diff(&q));
    }
    Ok(worst)
}
