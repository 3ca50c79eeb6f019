use std::ops::Range;

use super::config::ExperimentConfig;
use super::encoder::{Encoder, InputShape};
use super::eval_chunks;
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::sample_context_indices;
use crate::error::{Error, Result};
use crate::nn::{
    kl_to_standard_normal, sample_gaussian, BayesianLinear, Binder, BnMode, Linear, ParamStore, LOG_VAR_MIN,
};
use crate::noise::{substream, substream_indexed, NoiseSource, NoiseStreams, RngNoise, Stream};

/// `BayesianLinear → SiLU → Linear → SiLU → BayesianLinear`.
#[derive(Debug, Clone)]
pub struct InferenceNet {
    pub first: BayesianLinear,
    pub hidden: Linear,
    pub last: BayesianLinear,
}

/// Shared variational encoder plus the partially stochastic inference net.
#[derive(Debug, Clone)]
pub struct CibModel {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub net: InferenceNet,
    pub classes: usize,
}

/// Differentiable outputs of one CIB forward pass.
#[derive(Debug, Clone)]
pub struct CibOutput<'t> {
    /// `[B, K]`, the mean of `per_weight`.
    pub probs: Var<'t>,
    /// One `[B, K]` context-averaged prediction per weight draw.
    pub per_weight: Vec<Var<'t>>,
    pub kl_input: Var<'t>,
    pub kl_context: Var<'t>,
    pub kl_weights: Var<'t>,
}

impl CibModel {
    pub fn new(cfg: &ExperimentConfig, input: InputShape, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("classes: need at least 2, got {classes}")));
        }
        let rng = &mut substream(cfg.seed, Stream::Init);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, "encoder", cfg.encoder_kind, input, cfg.encoder_hidden, cfg.repr_dim, rng)?;
        let net = InferenceNet {
            first: BayesianLinear::new(&mut store, "net.fc1", cfg.repr_dim, cfg.hidden, rng),
            hidden: Linear::new(&mut store, "net.fc2", cfg.hidden, cfg.hidden, rng),
            last: BayesianLinear::new(&mut store, "net.fc3", cfg.hidden, classes, rng),
        };
        Ok(CibModel { store, encoder, net, classes })
    }

    /// One reparameterised representation sample and the summed KL of its
    /// variational parameters.
    pub fn encode<'t>(
        &self,
        b: &mut Binder<'t, '_>,
        images: Var<'t>,
        mode: BnMode,
        noise: &mut dyn NoiseSource,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (mean, log_var) = self.encoder.forward(b, images, mode)?;
        let eps = noise.standard_normal(&mean.shape());
        Ok((sample_gaussian(mean, log_var, &eps)?, kl_to_standard_normal(mean, log_var)?))
    }

    /// Drives every variance to its floor: Bayesian log-variances to the
    /// clamp minimum and the encoder's log-variance head to a constant
    /// floor output.
    pub fn collapse_variances(&mut self) -> Result<()> {
        self.store.set_log_vars_to_floor();
        let d = self.encoder.repr_dim;
        let head = &self.encoder.head;
        let w = self.store.get_mut(head.weight);
        let width = w.shape()[1];
        w.data_mut()[d * width..].iter_mut().for_each(|v| *v = 0.0);
        self.store.get_mut(head.bias).data_mut()[d..].iter_mut().for_each(|v| *v = LOG_VAR_MIN);
        Ok(())
    }
}

/// Runs the full CIB pipeline on a batch of `inputs` with one shared context
/// set `contexts` (`[N, ...]`).
///
/// In training mode inputs and contexts go through the encoder as one batch,
/// so batch normalisation sees both. In evaluation modes the inputs use
/// `mode` and the contexts, which come from the training split, use the
/// running statistics.
pub fn cib_forward<'t>(
    model: &CibModel,
    b: &mut Binder<'t, '_>,
    inputs: &Tensor,
    contexts: &Tensor,
    mode: BnMode,
    cfg: &ExperimentConfig,
    noise: &mut NoiseStreams<'_>,
) -> Result<CibOutput<'t>> {
    if cfg.m == 0 || cfg.l == 0 {
        return Err(Error::Config("m and l must be at least 1".into()));
    }
    let bsz = inputs.shape()[0];
    let n = contexts.shape()[0];
    if n == 0 {
        return Err(Error::Config("n: no context samples".into()));
    }
    let ((mu_x, lv_x), (mu_c, lv_c)) = if mode == BnMode::Train {
        let joint = b.constant(Tensor::concat_rows(&[inputs, contexts])?)?;
        let (mu, lv) = model.encoder.forward(b, joint, mode)?;
        ((mu.narrow(0, 0, bsz)?, lv.narrow(0, 0, bsz)?), (mu.narrow(0, bsz, n)?, lv.narrow(0, bsz, n)?))
    } else {
        let x = b.constant(inputs.clone())?;
        let c = b.constant(contexts.clone())?;
        (model.encoder.forward(b, x, mode)?, model.encoder.forward(b, c, BnMode::EvalIid)?)
    };
    let d = model.encoder.repr_dim;
    let kl_input = kl_to_standard_normal(mu_x, lv_x)?;
    let kl_context = kl_to_standard_normal(mu_c, lv_c)?;

    // Every (input, context) pair: r + r'_i, laid out as [B·N, d].
    let mut summed = Vec::with_capacity(cfg.l);
    for _ in 0..cfg.l {
        let r = sample_gaussian(mu_x, lv_x, &noise.encoder.standard_normal(&[bsz, d]))?;
        let rc = sample_gaussian(mu_c, lv_c, &noise.encoder.standard_normal(&[n, d]))?;
        summed.push(r.reshape(&[bsz, 1, d])?.add(rc.reshape(&[1, n, d])?)?.reshape(&[bsz * n, d])?);
    }

    let k = model.classes;
    let net = &model.net;
    let mut per_weight = Vec::with_capacity(cfg.m);
    for _ in 0..cfg.m {
        // One draw of the stochastic layers is shared by the whole batch,
        // every context and every representation sample.
        let first = net.first.draw(b, noise.weights)?;
        let last = net.last.draw(b, noise.weights)?;
        let mut acc: Option<Var<'t>> = None;
        for z in &summed {
            let h = net.first.apply(&first, *z)?.silu()?;
            let h = net.hidden.forward(b, h)?.silu()?;
            let p = net.last.apply(&last, h)?.softmax()?.reshape(&[bsz, n, k])?.mean_axis(1)?;
            acc = Some(match acc {
                None => p,
                Some(a) => a.add(p)?,
            });
        }
        let p = acc.expect("l >= 1");
        per_weight.push(if cfg.l > 1 { p.scale(1.0 / cfg.l as f64)? } else { p });
    }
    let mut probs = per_weight[0];
    for p in &per_weight[1..] {
        probs = probs.add(*p)?;
    }
    if cfg.m > 1 {
        probs = probs.scale(1.0 / cfg.m as f64)?;
    }
    let kl_weights = net.first.kl(b)?.add(net.last.kl(b)?)?;
    Ok(CibOutput { probs, per_weight, kl_input, kl_context, kl_weights })
}

/// Class predictions for `inputs`, drawing one set of N contexts from
/// `context_pool` per evaluation chunk. Deterministic in `seed`.
pub fn predict(
    model: &CibModel,
    inputs: &Tensor,
    context_pool: &Tensor,
    cfg: &ExperimentConfig,
    mode: BnMode,
    seed: u64,
) -> Result<(Vec<usize>, Tensor)> {
    let chunks = eval_chunks(inputs.shape()[0], cfg.batch_size, mode)?;
    let mut ctx_rng = substream(seed, Stream::Contexts);
    let mut enc = RngNoise(substream_indexed(seed, Stream::Eval, 1));
    let mut wts = RngNoise(substream_indexed(seed, Stream::Eval, 2));
    let mut parts = Vec::with_capacity(chunks.len());
    for Range { start, end } in chunks {
        let idx: Vec<usize> = (start..end).collect();
        let x = inputs.select_rows(&idx)?;
        let ctx = context_pool.select_rows(&sample_context_indices(context_pool.shape()[0], cfg.n, &mut ctx_rng)?)?;
        let tape = Tape::new();
        let mut b = Binder::new(&tape, &model.store);
        let mut noise = NoiseStreams { encoder: &mut enc, weights: &mut wts };
        parts.push(cib_forward(model, &mut b, &x, &ctx, mode, cfg, &mut noise)?.probs.value());
    }
    let probs = Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())?;
    Ok((probs.argmax_rows(), probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::loss::{mix_labels, total_loss};
    use crate::model::EncoderKind;
    use crate::noise::{RecordingNoise, ReplayNoise, ZeroNoise};
    use crate::testutil::check_all_params;

    fn tiny_cfg() -> ExperimentConfig {
        ExperimentConfig {
            n: 2,
            m: 2,
            repr_dim: 4,
            hidden: 8,
            encoder_hidden: 6,
            beta: 0.3,
            gamma: 0.01,
            mu_c: 0.02,
            epsilon: 0.001,
            ..Default::default()
        }
    }

    fn data(rows: usize, dim: usize, salt: f64) -> Tensor {
        Tensor::from_fn(&[rows, dim], |i| ((i as f64 + salt) * 0.731).sin() * 1.5)
    }

    fn forward_probs(model: &CibModel, cfg: &ExperimentConfig, x: &Tensor, ctx: &Tensor, mode: BnMode) -> Tensor {
        let tape = Tape::new();
        let mut b = Binder::new(&tape, &model.store);
        let (mut e, mut w) = (RngNoise::new(3, Stream::EncoderNoise), RngNoise::new(3, Stream::WeightNoise));
        let mut noise = NoiseStreams { encoder: &mut e, weights: &mut w };
        cib_forward(model, &mut b, x, ctx, mode, cfg, &mut noise).unwrap().probs.value()
    }

    #[test]
    fn probability_rows_sum_to_one() {
        let cfg = ExperimentConfig { n: 3, m: 3, ..tiny_cfg() };
        let model = CibModel::new(&cfg, InputShape::Vector(5), 3).unwrap();
        let probs = forward_probs(&model, &cfg, &data(4, 5, 0.0), &data(3, 5, 9.0), BnMode::Train);
        assert_eq!(probs.shape(), &[4, 3]);
        for r in 0..4 {
            assert!((probs.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn per_weight_mean_is_probs() {
        let cfg = ExperimentConfig { l: 2, ..tiny_cfg() };
        let model = CibModel::new(&cfg, InputShape::Vector(5), 3).unwrap();
        let tape = Tape::new();
        let mut b = Binder::new(&tape, &model.store);
        let (mut e, mut w) = (RngNoise::new(1, Stream::EncoderNoise), RngNoise::new(1, Stream::WeightNoise));
        let mut noise = NoiseStreams { encoder: &mut e, weights: &mut w };
        let out = cib_forward(&model, &mut b, &data(3, 5, 0.0), &data(2, 5, 4.0), BnMode::Train, &cfg, &mut noise)
            .unwrap();
        let (p0, p1) = (out.per_weight[0].value(), out.per_weight[1].value());
        let mean = Tensor::from_fn(&[3, 3], |i| 0.5 * (p0.data()[i] + p1.data()[i]));
        assert!(mean.max_abs_diff(&out.probs.value()) < 1e-15);
    }

    #[test]
    fn context_order_does_not_matter() {
        let cfg = tiny_cfg();
        let model = CibModel::new(&cfg, InputShape::Vector(5), 3).unwrap();
        let x = data(3, 5, 0.0);
        let ctx = data(2, 5, 7.0);
        let swapped = ctx.select_rows(&[1, 0]).unwrap();
        let run = |c: &Tensor| {
            let tape = Tape::new();
            let mut b = Binder::new(&tape, &model.store);
            let mut noise = NoiseStreams { encoder: &mut ZeroNoise, weights: &mut RngNoise::new(5, Stream::WeightNoise) };
            cib_forward(&model, &mut b, &x, c, BnMode::EvalIid, &cfg, &mut noise).unwrap().probs.value()
        };
        assert!(run(&ctx).max_abs_diff(&run(&swapped)) < 1e-15);
    }

    #[test]
    fn zero_counts_rejected() {
        let model = CibModel::new(&tiny_cfg(), InputShape::Vector(5), 3).unwrap();
        let tape = Tape::new();
        let mut b = Binder::new(&tape, &model.store);
        let mut noise = NoiseStreams { encoder: &mut ZeroNoise, weights: &mut ZeroNoise };
        let cfg = ExperimentConfig { m: 0, ..tiny_cfg() };
        let r = cib_forward(&model, &mut b, &data(2, 5, 0.0), &data(2, 5, 1.0), BnMode::EvalIid, &cfg, &mut noise);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn collapsed_encoder_emits_its_mean() {
        let cfg = tiny_cfg();
        let mut model = CibModel::new(&cfg, InputShape::Vector(5), 3).unwrap();
        model.collapse_variances().unwrap();
        let tape = Tape::new();
        let mut b = Binder::new(&tape, &model.store);
        let x = b.constant(data(4, 5, 0.0)).unwrap();
        let (mean, _) = model.encoder.forward(&mut b, x, BnMode::EvalIid).unwrap();
        let (r, _) = model.encode(&mut b, x, BnMode::EvalIid, &mut RngNoise::new(2, Stream::EncoderNoise)).unwrap();
        assert_eq!(r.shape(), vec![4, 4]);
        // σ = e^{-5}; |noise| stays below 4 for these 16 draws.
        assert!(r.value().max_abs_diff(&mean.value()) <= 4.0 * (-5f64).exp());
    }

    #[test]
    fn standard_normal_encoder_has_zero_kl() {
        let cfg = tiny_cfg();
        let mut model = CibModel::new(&cfg, InputShape::Vector(5), 3).unwrap();
        let head = model.encoder.head.clone();
        let zeros_w = crate::autodiff::Tensor::zeros(model.store.get(head.weight).shape());
        let zeros_b = crate::autodiff::Tensor::zeros(model.store.get(head.bias).shape());
        model.store.set(head.weight, zeros_w).unwrap();
        model.store.set(head.bias, zeros_b).unwrap();
        let tape = Tape::new();
        let mut b = Binder::new(&tape, &model.store);
        let x = b.constant(data(3, 5, 0.0)).unwrap();
        let (_, kl) = model.encode(&mut b, x, BnMode::EvalIid, &mut ZeroNoise).unwrap();
        assert_eq!(kl.item(), 0.0);
    }

    #[test]
    fn floors_collapse_weight_draws() {
        // Default layer sizes.
        let cfg = ExperimentConfig { n: 3, m: 1, ..Default::default() };
        let mut model = CibModel::new(&cfg, InputShape::Vector(8), 4).unwrap();
        model.collapse_variances().unwrap();
        let x = data(4, 8, 0.0);
        let ctx = data(3, 8, 2.0);
        let mut w = RngNoise::new(8, Stream::WeightNoise);
        let outs: Vec<Tensor> = (0..100)
            .map(|_| {
                let tape = Tape::new();
                let mut b = Binder::new(&tape, &model.store);
                let mut noise = NoiseStreams { encoder: &mut ZeroNoise, weights: &mut w };
                cib_forward(&model, &mut b, &x, &ctx, BnMode::EvalIid, &cfg, &mut noise).unwrap().probs.value()
            })
            .collect();
        let mut worst: f64 = 0.0;
        for i in 0..outs.len() {
            for j in i + 1..outs.len() {
                worst = worst.max(outs[i].max_abs_diff(&outs[j]));
            }
        }
        assert!(worst <= 1e-2, "max pairwise distance {worst}");
    }

    #[test]
    fn predict_is_deterministic_and_validates_pool() {
        let cfg = ExperimentConfig { n: 1, batch_size: 4, ..tiny_cfg() };
        let mut model = CibModel::new(&cfg, InputShape::Vector(5), 3).unwrap();
        model.collapse_variances().unwrap();
        let x = data(10, 5, 0.0);
        let pool = data(6, 5, 3.0);
        let a = predict(&model, &x, &pool, &cfg, BnMode::EvalOod, 11).unwrap();
        let b = predict(&model, &x, &pool, &cfg, BnMode::EvalOod, 11).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.0.len(), 10);
        let cfg_big = ExperimentConfig { n: 7, ..cfg };
        assert!(predict(&model, &x, &pool, &cfg_big, BnMode::EvalIid, 11).is_err());
    }

    #[test]
    fn end_to_end_loss_gradients() {
        let cfg = tiny_cfg();
        let mut model = CibModel::new(&cfg, InputShape::Vector(5), 3).unwrap();
        // Moderate variances so every log-variance matters to the loss.
        for id in model.store.ids().collect::<Vec<_>>() {
            if model.store.kind(id) == crate::nn::ParamKind::LogVar {
                model.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = -2.0);
            }
        }
        let x = data(2, 5, 0.0);
        let ctx = data(2, 5, 5.0);
        let labels = Tensor::new(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let ctx_labels = Tensor::new(&[2, 3], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let mixed = mix_labels(&labels, &ctx_labels, cfg.alpha).unwrap();

        let mut enc = RecordingNoise::new(RngNoise::new(4, Stream::EncoderNoise));
        let mut wts = RecordingNoise::new(RngNoise::new(4, Stream::WeightNoise));
        {
            let tape = Tape::new();
            let mut b = Binder::new(&tape, &model.store);
            let mut noise = NoiseStreams { encoder: &mut enc, weights: &mut wts };
            cib_forward(&model, &mut b, &x, &ctx, BnMode::Train, &cfg, &mut noise).unwrap();
        }
        let (enc, wts) = (enc.recorded, wts.recorded);
        let loss = |store: &ParamStore| {
            let m = CibModel { store: store.clone(), ..model.clone() };
            let tape = Tape::new();
            let mut b = Binder::new(&tape, &m.store);
            let (mut e, mut w) = (ReplayNoise::new(enc.clone()), ReplayNoise::new(wts.clone()));
            let mut noise = NoiseStreams { encoder: &mut e, weights: &mut w };
            let out = cib_forward(&m, &mut b, &x, &ctx, BnMode::Train, &cfg, &mut noise).unwrap();
            let (total, _) = total_loss(&out, &mixed, &cfg).unwrap();
            tape.backward(total).unwrap();
            (total.item(), b.grads())
        };
        check_all_params(&model.store, loss, 1e-3);
    }

    #[test]
    fn cnn_model_runs() {
        let cfg = ExperimentConfig { encoder_kind: EncoderKind::Cnn, ..tiny_cfg() };
        let input = InputShape::Image { channels: 2, height: 4, width: 4 };
        let model = CibModel::new(&cfg, input, 3).unwrap();
        let x = Tensor::from_fn(&input.batch(3), |i| (i as f64).cos());
        let ctx = Tensor::from_fn(&input.batch(2), |i| (i as f64).sin());
        let p = forward_probs(&model, &cfg, &x, &ctx, BnMode::Train);
        assert_eq!(p.shape(), &[3, 3]);
    }
}
