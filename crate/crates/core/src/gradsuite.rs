//! Finite-difference gradient suite: every differentiable tape op, every
//! layer, and the end-to-end losses of the CIB model and both baselines.
//!
//! Each entry is checked at several random points and reports the worst
//! relative error seen.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{finite_difference_check, AutodiffError, Tape, Tensor, Var};
use crate::baselines::{ct_forward, ct_loss, pointwise_forward, CtModel, CtWeights, PointModel};
use crate::data::one_hot;
use crate::error::Result;
use crate::model::{cib_forward, mix_labels, total_loss, CibModel, ExperimentConfig, InputShape};
use crate::nn::{
    param_gradient_check, BatchNorm, Binder, BnMode, BayesianLinear, Conv2d, Linear, ParamKind, ParamStore,
};
use crate::noise::{substream_indexed, NoiseStreams, RecordingNoise, ReplayNoise, RngNoise, Stream};

pub const FD_EPS: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-4;
pub const LAYER_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub points: usize,
    pub tol: f64,
    pub max_rel_error: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

type OpFn = for<'t> fn(&'t Tape, Var<'t>) -> std::result::Result<Var<'t>, AutodiffError>;

#[derive(Clone, Copy)]
enum Domain {
    /// Standard normal, kept away from the kinks of relu and clamp.
    Real,
    /// Uniform on `[0.2, 2]`.
    Positive,
}

fn split2<'t>(x: Var<'t>, a: &[usize], b: &[usize]) -> std::result::Result<(Var<'t>, Var<'t>), AutodiffError> {
    let (na, nb) = (a.iter().product(), b.iter().product());
    Ok((x.narrow(0, 0, na)?.reshape(a)?, x.narrow(0, na, nb)?.reshape(b)?))
}

const CLAMP: (f64, f64) = (-0.5, 0.5);

fn ops() -> Vec<(&'static str, usize, Domain, OpFn)> {
    vec![
        ("add", 9, Domain::Real, |_, x| {
            let (a, b) = split2(x, &[2, 3], &[1, 3])?;
            a.add(b)
        }),
        ("sub", 9, Domain::Real, |_, x| {
            let (a, b) = split2(x, &[2, 3], &[2, 1])?;
            a.sub(b)
        }),
        ("mul", 9, Domain::Real, |_, x| {
            let (a, b) = split2(x, &[2, 3], &[1, 3])?;
            a.mul(b)
        }),
        ("div", 9, Domain::Positive, |_, x| {
            let (a, b) = split2(x, &[2, 3], &[1, 3])?;
            a.div(b)
        }),
        ("scale", 6, Domain::Real, |_, x| x.scale(-1.7)),
        ("add_scalar", 6, Domain::Real, |_, x| x.add_scalar(0.3)?.square()),
        ("matmul", 18, Domain::Real, |_, x| {
            let (a, b) = split2(x, &[2, 3], &[3, 4])?;
            a.matmul(b)
        }),
        ("transpose", 12, Domain::Real, |_, x| x.reshape(&[3, 4])?.transpose()),
        ("sum_axis", 12, Domain::Real, |_, x| x.reshape(&[3, 4])?.sum_axis(0)),
        ("mean_axis", 12, Domain::Real, |_, x| x.reshape(&[3, 4])?.mean_axis(1)),
        ("sum", 7, Domain::Real, |_, x| x.square()?.sum()),
        ("mean", 7, Domain::Real, |_, x| x.square()?.mean()),
        ("reshape", 12, Domain::Real, |_, x| x.reshape(&[2, 2, 3])),
        ("narrow", 12, Domain::Real, |_, x| x.reshape(&[3, 4])?.narrow(1, 1, 2)),
        ("concat", 10, Domain::Real, |_, x| {
            let (a, b) = split2(x, &[2, 3], &[2, 2])?;
            Var::concat(&[a, b], 1)
        }),
        ("conv2d", 86, Domain::Real, |_, x| {
            let (img, w) = split2(x, &[1, 2, 4, 4], &[3, 2, 3, 3])?;
            img.conv2d(w, 1)
        }),
        ("max_pool2d", 32, Domain::Real, |_, x| x.reshape(&[1, 2, 4, 4])?.max_pool2d(2)),
        ("relu", 8, Domain::Real, |_, x| x.relu()),
        ("silu", 8, Domain::Real, |_, x| x.silu()),
        ("exp", 8, Domain::Real, |_, x| x.exp()),
        ("log", 8, Domain::Positive, |_, x| x.log()),
        ("square", 8, Domain::Real, |_, x| x.square()),
        ("sqrt", 8, Domain::Positive, |_, x| x.sqrt()),
        ("clamp", 8, Domain::Real, |_, x| x.clamp(CLAMP.0, CLAMP.1)),
        ("softmax", 12, Domain::Real, |_, x| x.reshape(&[3, 4])?.softmax()),
        ("softmax_cross_entropy", 12, Domain::Real, |_, x| {
            let target = Tensor::new(&[3, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.3, 0.7, 0.0, 0.25, 0.25, 0.25, 0.25])?;
            x.reshape(&[3, 4])?.softmax_cross_entropy(&target)
        }),
    ]
}

fn draw_point(rng: &mut ChaCha8Rng, n: usize, domain: Domain) -> Tensor {
    Tensor::from_fn(&[n], |_| match domain {
        Domain::Positive => rng.random_range(0.2..2.0),
        Domain::Real => loop {
            let v: f64 = rng.sample(StandardNormal);
            let kink = [0.0, CLAMP.0, CLAMP.1].iter().map(|k| (v - k).abs()).fold(f64::INFINITY, f64::min);
            if kink > 0.05 {
                break v;
            }
        },
    })
}

fn normals(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn rng_for(seed: u64, point: usize) -> ChaCha8Rng {
    substream_indexed(seed, Stream::Init, point as u64)
}

/// Each op is scalarised as `sum(op(x) ⊙ c)` with a fixed random `c`.
pub fn op_checks(points: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for (name, n, domain, op) in ops() {
        let mut worst: f64 = 0.0;
        for p in 0..points {
            let rng = &mut rng_for(seed, p);
            let x = draw_point(rng, n, domain);
            let out_shape = {
                let tape = Tape::new();
                op(&tape, tape.constant(x.clone())?)?.shape()
            };
            let c = normals(rng, &out_shape);
            let r = finite_difference_check(
                |tape, v| op(tape, v)?.mul(tape.constant(c.clone())?)?.sum(),
                &x,
                FD_EPS,
                OP_TOL,
            )?;
            worst = worst.max(r.max_rel_error);
        }
        out.push(SuiteEntry { name: name.to_string(), points, tol: OP_TOL, max_rel_error: worst });
    }
    Ok(out)
}

/// Gradient of `sum(layer(x) ⊙ c)` with respect to the input and to every
/// trainable parameter.
fn layer_entry<F>(name: &str, points: usize, seed: u64, mut build: F) -> Result<SuiteEntry>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<LayerCase>,
{
    let mut worst: f64 = 0.0;
    for p in 0..points {
        let rng = &mut rng_for(seed, p);
        let case = build(rng)?;
        let out_shape = {
            let tape = Tape::new();
            let mut b = Binder::new(&tape, &case.store);
            let x = b.constant(case.input.clone())?;
            (case.forward)(&mut b, x)?.shape()
        };
        let c = normals(rng, &out_shape);
        let r = finite_difference_check(
            |tape, x| {
                let mut b = Binder::new(tape, &case.store);
                let c = b.constant(c.clone())?;
                Ok::<_, crate::Error>((case.forward)(&mut b, x)?.mul(c)?.sum()?)
            },
            &case.input,
            FD_EPS,
            LAYER_TOL,
        )?;
        worst = worst.max(r.max_rel_error);
        let params = param_gradient_check(
            &case.store,
            |store| {
                let tape = Tape::new();
                let mut b = Binder::new(&tape, store);
                let x = b.constant(case.input.clone())?;
                let c = b.constant(c.clone())?;
                let loss = (case.forward)(&mut b, x)?.mul(c)?.sum()?;
                tape.backward(loss)?;
                Ok((loss.item(), b.grads()))
            },
            FD_EPS,
        )?;
        worst = worst.max(params.max_rel_error);
    }
    Ok(SuiteEntry { name: name.to_string(), points, tol: LAYER_TOL, max_rel_error: worst })
}

type LayerForward = Box<dyn for<'t, 's> Fn(&mut Binder<'t, 's>, Var<'t>) -> Result<Var<'t>>>;

struct LayerCase {
    store: ParamStore,
    input: Tensor,
    forward: LayerForward,
}

/// Perturbs batch-norm scale and shift and the running statistics away
/// from their identity initialisation.
fn randomise_bn(store: &mut ParamStore, bn: &BatchNorm, rng: &mut ChaCha8Rng) {
    let c = bn.channels;
    store.get_mut(bn.scale).data_mut().copy_from_slice(&normals(rng, &[c]).into_data());
    store.get_mut(bn.shift).data_mut().copy_from_slice(&normals(rng, &[c]).into_data());
    store.get_mut(bn.running_mean).data_mut().copy_from_slice(&normals(rng, &[c]).into_data());
    let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
    store.get_mut(bn.running_var).data_mut().copy_from_slice(&var);
}

pub fn layer_checks(points: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = vec![
        layer_entry("linear", points, seed, |rng| {
            let mut store = ParamStore::new();
            let layer = Linear::new(&mut store, "l", 4, 3, rng);
            Ok(LayerCase {
                store,
                input: normals(rng, &[3, 4]),
                forward: Box::new(move |b, x| layer.forward(b, x)),
            })
        })?,
        layer_entry("conv2d", points, seed, |rng| {
            let mut store = ParamStore::new();
            let layer = Conv2d::new(&mut store, "c", 2, 3, 3, rng);
            Ok(LayerCase {
                store,
                input: normals(rng, &[2, 2, 4, 4]),
                forward: Box::new(move |b, x| layer.forward(b, x)),
            })
        })?,
    ];
    for (name, mode) in [
        ("batch_norm_train", BnMode::Train),
        ("batch_norm_eval_iid", BnMode::EvalIid),
        ("batch_norm_eval_ood", BnMode::EvalOod),
    ] {
        out.push(layer_entry(name, points, seed, |rng| {
            let mut store = ParamStore::new();
            let bn = BatchNorm::new(&mut store, "bn", 3);
            randomise_bn(&mut store, &bn, rng);
            Ok(LayerCase { store, input: normals(rng, &[5, 3]), forward: Box::new(move |b, x| bn.forward(b, x, mode)) })
        })?);
    }
    out.push(layer_entry("batch_norm_channels", points, seed, |rng| {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        randomise_bn(&mut store, &bn, rng);
        Ok(LayerCase {
            store,
            input: normals(rng, &[2, 2, 3, 3]),
            forward: Box::new(move |b, x| bn.forward(b, x, BnMode::Train)),
        })
    })?);
    out.push(layer_entry("bayesian_linear", points, seed, |rng| {
        let mut store = ParamStore::new();
        let layer = BayesianLinear::new(&mut store, "bl", 4, 3, rng);
        for id in store.ids().collect::<Vec<_>>() {
            if store.kind(id) == ParamKind::LogVar {
                let n = store.get(id).numel();
                let lv: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..0.0)).collect();
                store.get_mut(id).data_mut().copy_from_slice(&lv);
            }
        }
        let noise = vec![normals(rng, &[3, 4]), normals(rng, &[3])];
        Ok(LayerCase {
            store,
            input: normals(rng, &[3, 4]),
            forward: Box::new(move |b, x| {
                let out = layer.forward(b, x, &mut ReplayNoise::new(noise.clone()))?;
                Ok(out.add(layer.kl(b)?)?)
            }),
        })
    })?);
    Ok(out)
}

/// Tiny model sizes for the end-to-end checks.
pub fn tiny_config(seed: u64) -> ExperimentConfig {
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
        seed,
        ..Default::default()
    }
}

const TINY_INPUT: InputShape = InputShape::Vector(5);
const TINY_CLASSES: usize = 3;

fn set_log_vars(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        if store.kind(id) == ParamKind::LogVar {
            let n = store.get(id).numel();
            let lv: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..-1.0)).collect();
            store.get_mut(id).data_mut().copy_from_slice(&lv);
        }
    }
}

fn tiny_labels(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..TINY_CLASSES)).collect();
    one_hot(&labels, TINY_CLASSES)
}

/// CIB total loss (B=2, N=2, M=2, d_R=4, h=8, K=3) at fixed noise.
pub fn cib_loss_check(seed: u64) -> Result<f64> {
    let cfg = tiny_config(seed);
    let rng = &mut rng_for(seed, 1000);
    let mut model = CibModel::new(&cfg, TINY_INPUT, TINY_CLASSES)?;
    // Moderate variances so every log-variance matters to the loss.
    set_log_vars(&mut model.store, rng);
    let x = normals(rng, &TINY_INPUT.batch(2));
    let ctx = normals(rng, &TINY_INPUT.batch(cfg.n));
    let mixed = mix_labels(&tiny_labels(rng, 2), &tiny_labels(rng, cfg.n), cfg.alpha)?;
    let mut enc = RecordingNoise::new(RngNoise::new(seed, Stream::EncoderNoise));
    let mut wts = RecordingNoise::new(RngNoise::new(seed, Stream::WeightNoise));
    {
        let tape = Tape::new();
        let mut b = Binder::new(&tape, &model.store);
        let mut noise = NoiseStreams { encoder: &mut enc, weights: &mut wts };
        cib_forward(&model, &mut b, &x, &ctx, BnMode::Train, &cfg, &mut noise)?;
    }
    let (enc, wts) = (enc.recorded, wts.recorded);
    let r = param_gradient_check(
        &model.store,
        |store| {
            let m = CibModel { store: store.clone(), ..model.clone() };
            let tape = Tape::new();
            let mut b = Binder::new(&tape, &m.store);
            let (mut e, mut w) = (ReplayNoise::new(enc.clone()), ReplayNoise::new(wts.clone()));
            let mut noise = NoiseStreams { encoder: &mut e, weights: &mut w };
            let out = cib_forward(&m, &mut b, &x, &ctx, BnMode::Train, &cfg, &mut noise)?;
            let (total, _) = total_loss(&out, &mixed, &cfg)?;
            tape.backward(total)?;
            Ok((total.item(), b.grads()))
        },
        FD_EPS,
    )?;
    Ok(r.max_rel_error)
}

pub fn point_loss_check(seed: u64) -> Result<f64> {
    let cfg = tiny_config(seed);
    let rng = &mut rng_for(seed, 1001);
    let model = PointModel::new(&cfg, TINY_INPUT, TINY_CLASSES)?;
    let x = normals(rng, &TINY_INPUT.batch(4));
    let y = tiny_labels(rng, 4);
    let r = param_gradient_check(
        &model.store,
        |store| {
            let m = PointModel { store: store.clone(), ..model.clone() };
            let tape = Tape::new();
            let mut b = Binder::new(&tape, &m.store);
            let (_, logits) = pointwise_forward(&m, &mut b, &x, BnMode::Train)?;
            let loss = logits.softmax_cross_entropy(&y)?;
            tape.backward(loss)?;
            Ok((loss.item(), b.grads()))
        },
        FD_EPS,
    )?;
    Ok(r.max_rel_error)
}

pub fn ct_loss_check(seed: u64) -> Result<f64> {
    let cfg = tiny_config(seed);
    let rng = &mut rng_for(seed, 1002);
    let model = CtModel::new(&cfg, TINY_INPUT, TINY_CLASSES)?;
    let weights = CtWeights { ce: 1.0, recon: 0.5, kl: 0.1 };
    let x = normals(rng, &TINY_INPUT.batch(2));
    let ctx = normals(rng, &TINY_INPUT.batch(cfg.n));
    let y = tiny_labels(rng, 2);
    let mut rec = RecordingNoise::new(RngNoise::new(seed, Stream::EncoderNoise));
    {
        let tape = Tape::new();
        let mut b = Binder::new(&tape, &model.store);
        ct_forward(&model, &mut b, &x, &ctx, BnMode::Train, &mut rec)?;
    }
    let recorded = rec.recorded;
    let r = param_gradient_check(
        &model.store,
        |store| {
            let m = CtModel { store: store.clone(), ..model.clone() };
            let tape = Tape::new();
            let mut b = Binder::new(&tape, &m.store);
            let out = ct_forward(&m, &mut b, &x, &ctx, BnMode::Train, &mut ReplayNoise::new(recorded.clone()))?;
            let (loss, _) = ct_loss(&out, &y, weights)?;
            tape.backward(loss)?;
            Ok((loss.item(), b.grads()))
        },
        FD_EPS,
    )?;
    Ok(r.max_rel_error)
}

pub fn end_to_end_checks(points: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    let checks: [(&str, fn(u64) -> Result<f64>); 3] =
        [("cib_total_loss", cib_loss_check), ("point_loss", point_loss_check), ("ct_loss", ct_loss_check)];
    for (name, check) in checks {
        let mut worst: f64 = 0.0;
        for p in 0..points {
            worst = worst.max(check(seed.wrapping_add(p as u64))?);
        }
        out.push(SuiteEntry { name: name.to_string(), points, tol: END_TO_END_TOL, max_rel_error: worst });
    }
    Ok(out)
}

/// The whole suite.
pub fn gradient_suite(points: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = op_checks(points, seed)?;
    out.extend(layer_checks(points, seed)?);
    out.extend(end_to_end_checks(points, seed)?);
    Ok(out)
}
