use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{probs_cross_entropy, Encoder, ExperimentConfig, InputShape};
use crate::nn::{kl_to_standard_normal, sample_gaussian, Binder, BnMode, Linear, ParamStore};
use crate::noise::{substream, NoiseSource, Stream};

/// Causal-transportability baseline: a VAE over inputs and a point inference
/// network reading a context example concatenated with the representation.
#[derive(Debug, Clone)]
pub struct CtModel {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: [Linear; 2],
    /// First layer width is `flat(input) + repr_dim`.
    pub inference: [Linear; 3],
    pub classes: usize,
    pub input: InputShape,
}

/// Loss weights of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CtWeights {
    pub ce: f64,
    pub recon: f64,
    pub kl: f64,
}

impl CtWeights {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let w = CtWeights { ce: cfg.ce_weight, recon: cfg.recon_weight, kl: cfg.kl_weight };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.ce, self.recon, self.kl].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("ct loss weights must be finite and non-negative".into()));
        }
        if self.ce == 0.0 && self.recon == 0.0 && self.kl == 0.0 {
            return Err(Error::Config("ce_weight: CT loss weights are all zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CtOutput<'t> {
    pub probs: Var<'t>,
    /// Mean squared pixel error of the decoder.
    pub recon: Var<'t>,
    pub kl: Var<'t>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CtBreakdown {
    pub cross_entropy: f64,
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

impl CtModel {
    pub fn new(cfg: &ExperimentConfig, input: InputShape, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("classes: need at least 2, got {classes}")));
        }
        let rng = &mut substream(cfg.seed, Stream::Init);
        let mut store = ParamStore::new();
        let d = cfg.repr_dim;
        let encoder = Encoder::new(&mut store, "encoder", cfg.encoder_kind, input, cfg.encoder_hidden, d, rng)?;
        let decoder = [
            Linear::new(&mut store, "decoder.fc1", d, cfg.encoder_hidden, rng),
            Linear::new(&mut store, "decoder.fc2", cfg.encoder_hidden, input.flat(), rng),
        ];
        let inference = [
            Linear::new(&mut store, "inference.fc1", input.flat() + d, cfg.hidden, rng),
            Linear::new(&mut store, "inference.fc2", cfg.hidden, cfg.hidden, rng),
            Linear::new(&mut store, "inference.fc3", cfg.hidden, classes, rng),
        ];
        Ok(CtModel { store, encoder, decoder, inference, classes, input })
    }

    /// Representation sample, its KL and the reconstruction error.
    fn vae<'t>(
        &self,
        b: &mut Binder<'t, '_>,
        inputs: &Tensor,
        mode: BnMode,
        noise: &mut dyn NoiseSource,
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let bsz = inputs.shape()[0];
        let x = b.constant(inputs.clone())?;
        let (mean, log_var) = self.encoder.forward(b, x, mode)?;
        let r = sample_gaussian(mean, log_var, &noise.standard_normal(&mean.shape()))?;
        let kl = kl_to_standard_normal(mean, log_var)?;
        let h = self.decoder[0].forward(b, r)?.silu()?;
        let recon = self.decoder[1].forward(b, h)?;
        let target = b.constant(inputs.reshaped(&[bsz, self.input.flat()])?)?;
        let mse = recon.sub(target)?.square()?.mean()?;
        Ok((r, kl, mse))
    }

    /// Reconstruction objective of the VAE alone, for pretraining.
    pub fn vae_loss<'t>(
        &self,
        b: &mut Binder<'t, '_>,
        inputs: &Tensor,
        weights: CtWeights,
        noise: &mut dyn NoiseSource,
    ) -> Result<(Var<'t>, f64)> {
        let (_, kl, mse) = self.vae(b, inputs, BnMode::Train, noise)?;
        let recon = mse.item();
        Ok((mse.scale(weights.recon)?.add(kl.scale(weights.kl)?)?, recon))
    }
}

/// `probs = mean_i softmax(inference([flatten(x_i), r]))` over the N context
/// examples, with `r` sampled from the VAE posterior of each input.
pub fn ct_forward<'t>(
    model: &CtModel,
    b: &mut Binder<'t, '_>,
    inputs: &Tensor,
    contexts: &Tensor,
    mode: BnMode,
    noise: &mut dyn NoiseSource,
) -> Result<CtOutput<'t>> {
    let bsz = inputs.shape()[0];
    let n = contexts.shape()[0];
    if n == 0 {
        return Err(Error::Config("n: no context samples".into()));
    }
    let flat = model.input.flat();
    if contexts.numel() != n * flat {
        return Err(Error::Shape(format!("contexts {:?} do not match input {:?}", contexts.shape(), model.input)));
    }
    let (r, kl, recon) = model.vae(b, inputs, mode, noise)?;
    let d = model.encoder.repr_dim;
    // [B, N, flat + d] rows pairing every input's r with every context.
    let ctx = b.constant(contexts.reshaped(&[1, n, flat])?)?;
    let ctx = ctx.add(b.constant(Tensor::zeros(&[bsz, n, flat]))?)?;
    let rr = r.reshape(&[bsz, 1, d])?.add(b.constant(Tensor::zeros(&[bsz, n, d]))?)?;
    let z = Var::concat(&[ctx, rr], 2)?.reshape(&[bsz * n, flat + d])?;
    let h = model.inference[0].forward(b, z)?.silu()?;
    let h = model.inference[1].forward(b, h)?.silu()?;
    let logits = model.inference[2].forward(b, h)?;
    let probs = logits.softmax()?.reshape(&[bsz, n, model.classes])?.mean_axis(1)?;
    Ok(CtOutput { probs, recon, kl })
}

/// `ce·CE + recon·MSE + kl·KL`.
pub fn ct_loss<'t>(out: &CtOutput<'t>, labels: &Tensor, weights: CtWeights) -> Result<(Var<'t>, CtBreakdown)> {
    weights.validate()?;
    let (ce, _) = probs_cross_entropy(out.probs, labels)?;
    let total = ce.scale(weights.ce)?.add(out.recon.scale(weights.recon)?)?.add(out.kl.scale(weights.kl)?)?;
    let bd = CtBreakdown { cross_entropy: ce.item(), recon: out.recon.item(), kl: out.kl.item(), total: total.item() };
    Ok((total, bd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::noise::{RecordingNoise, ReplayNoise, RngNoise, ZeroNoise};
    use crate::testutil::check_all_params;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig { model: crate::model::ModelKind::Ct, repr_dim: 3, hidden: 6, encoder_hidden: 5, ..Default::default() }
    }

    #[test]
    fn shapes_and_widths() {
        let input = InputShape::Image { channels: 1, height: 4, width: 4 };
        let m = CtModel::new(&cfg(), input, 3).unwrap();
        assert_eq!(m.inference[0].in_dim, 16 + 3);
        let x = Tensor::from_fn(&input.batch(2), |i| (i as f64 * 0.3).sin());
        let ctx = Tensor::from_fn(&input.batch(4), |i| (i as f64 * 0.7).cos());
        let tape = Tape::new();
        let mut b = Binder::new(&tape, &m.store);
        let out = ct_forward(&m, &mut b, &x, &ctx, BnMode::Train, &mut ZeroNoise).unwrap();
        assert_eq!(out.probs.shape(), vec![2, 3]);
        for r in 0..2 {
            assert!((out.probs.value().row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn context_mean_of_opposed_predictions() {
        // Zeroing all but the context inputs of the first inference layer
        // makes each p_i depend on x_i alone.
        let c = ExperimentConfig { hidden: 2, ..cfg() };
        let mut m = CtModel::new(&c, InputShape::Vector(1), 2).unwrap();
        let set = |m: &mut CtModel, id, v: Vec<f64>, shape: &[usize]| m.store.set(id, Tensor::new(shape, v).unwrap()).unwrap();
        let inf = m.inference.clone();
        set(&mut m, inf[0].weight, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], &[2, 4]);
        set(&mut m, inf[0].bias, vec![0.0, 0.0], &[2]);
        set(&mut m, inf[1].weight, vec![1.0, 0.0, 0.0, 0.0], &[2, 2]);
        set(&mut m, inf[1].bias, vec![0.0, 0.0], &[2]);
        set(&mut m, inf[2].weight, vec![1000.0, 0.0, -1000.0, 0.0], &[2, 2]);
        set(&mut m, inf[2].bias, vec![0.0, 0.0], &[2]);
        let x = Tensor::new(&[2, 1], vec![0.3, -0.2]).unwrap();
        let ctx = Tensor::new(&[2, 1], vec![5.0, -5.0]).unwrap();
        let tape = Tape::new();
        let mut b = Binder::new(&tape, &m.store);
        let out = ct_forward(&m, &mut b, &x, &ctx, BnMode::Train, &mut ZeroNoise).unwrap();
        // p_1 ≈ [1, 0], p_2 ≈ [0, 1].
        let p = out.probs.value();
        for r in 0..2 {
            assert!((p.data()[2 * r] - 0.5).abs() < 1e-9 && (p.data()[2 * r + 1] - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn standard_normal_posterior_has_zero_kl() {
        let mut m = CtModel::new(&cfg(), InputShape::Vector(4), 2).unwrap();
        let head = m.encoder.head.clone();
        let zw = Tensor::zeros(m.store.get(head.weight).shape());
        let zb = Tensor::zeros(m.store.get(head.bias).shape());
        m.store.set(head.weight, zw).unwrap();
        m.store.set(head.bias, zb).unwrap();
        let tape = Tape::new();
        let mut b = Binder::new(&tape, &m.store);
        let x = Tensor::from_fn(&[3, 4], |i| i as f64);
        let out = ct_forward(&m, &mut b, &x, &x, BnMode::Train, &mut ZeroNoise).unwrap();
        assert_eq!(out.kl.item(), 0.0);
    }

    #[test]
    fn loss_weighting() {
        let tape = Tape::new();
        let probs = tape.constant(Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap()).unwrap();
        let out = CtOutput {
            probs,
            recon: tape.constant(Tensor::scalar(3.0)).unwrap(),
            kl: tape.constant(Tensor::scalar(7.0)).unwrap(),
        };
        let y = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let (_, bd) = ct_loss(&out, &y, CtWeights { ce: 1.0, recon: 0.0, kl: 0.0 }).unwrap();
        assert!((bd.total - std::f64::consts::LN_2).abs() < 1e-15);
        let (_, bd) = ct_loss(&out, &y, CtWeights { ce: 1.0, recon: 1.0, kl: 1e-3 }).unwrap();
        assert!((bd.total - (std::f64::consts::LN_2 + 3.0 + 7e-3)).abs() < 1e-12);
        assert!(ct_loss(&out, &y, CtWeights { ce: 0.0, recon: 0.0, kl: 0.0 }).is_err());
    }

    #[test]
    fn loss_gradients() {
        let c = cfg();
        let m = CtModel::new(&c, InputShape::Vector(4), 3).unwrap();
        let x = Tensor::from_fn(&[3, 4], |i| ((i as f64) * 0.77).sin());
        let ctx = Tensor::from_fn(&[2, 4], |i| ((i as f64) * 0.41).cos());
        let y = crate::data::one_hot(&[2, 0, 1], 3);
        let w = CtWeights::from_config(&c).unwrap();
        let mut rec = RecordingNoise::new(RngNoise::new(2, Stream::EncoderNoise));
        {
            let tape = Tape::new();
            let mut b = Binder::new(&tape, &m.store);
            ct_forward(&m, &mut b, &x, &ctx, BnMode::Train, &mut rec).unwrap();
        }
        check_all_params(
            &m.store,
            |store| {
                let mm = CtModel { store: store.clone(), ..m.clone() };
                let tape = Tape::new();
                let mut b = Binder::new(&tape, &mm.store);
                let out = ct_forward(&mm, &mut b, &x, &ctx, BnMode::Train, &mut ReplayNoise::new(rec.recorded.clone()))
                    .unwrap();
                let (loss, _) = ct_loss(&out, &y, w).unwrap();
                tape.backward(loss).unwrap();
                (loss.item(), b.grads())
            },
            1e-3,
        );
    }
}
