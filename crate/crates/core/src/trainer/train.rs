use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;

use super::eval::{evaluate, EvalMode, EvalResult};
use super::{AnyModel, Optimizer};
use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::baselines::{ct_forward, ct_loss, pointwise_forward, CtModel, CtWeights};
use crate::data::{one_hot, sample_context_indices, DatasetBundle, Split};
use crate::error::{Error, Result};
use crate::model::{cib_forward, mix_labels, total_loss, ExperimentConfig, ModelKind};
use crate::nn::{apply_buffer_updates, Binder, BnMode, Checkpoint, ParamStore};
use crate::noise::{substream, substream_indexed, NoiseStreams, RngNoise, Stream, ZeroNoise};

/// Loss components shared by all model families; terms a family does not
/// have stay zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub cross_entropy: f64,
    pub recon: f64,
    pub weight_func: f64,
    pub kl_input: f64,
    pub kl_context: f64,
    pub kl_weights: f64,
}

impl LossTerms {
    fn array(&self) -> [f64; 6] {
        [self.cross_entropy, self.recon, self.weight_func, self.kl_input, self.kl_context, self.kl_weights]
    }

    fn from_array(a: [f64; 6]) -> Self {
        LossTerms {
            cross_entropy: a[0],
            recon: a[1],
            weight_func: a[2],
            kl_input: a[3],
            kl_context: a[4],
            kl_weights: a[5],
        }
    }

    /// Coefficients of each term in the training objective of `cfg.model`.
    pub fn weights(cfg: &ExperimentConfig) -> LossTerms {
        match cfg.model {
            ModelKind::Cib => LossTerms {
                cross_entropy: 1.0,
                weight_func: cfg.beta,
                kl_input: cfg.gamma,
                kl_context: cfg.mu_c,
                kl_weights: cfg.epsilon,
                ..Default::default()
            },
            ModelKind::Point => LossTerms { cross_entropy: 1.0, ..Default::default() },
            ModelKind::Ct => LossTerms {
                cross_entropy: cfg.ce_weight,
                recon: cfg.recon_weight,
                kl_input: cfg.kl_weight,
                ..Default::default()
            },
        }
    }

    /// Weighted sum, accumulated term by term in field order. This matches
    /// the order in which every model builds its loss on the tape.
    pub fn total(&self, weights: &LossTerms) -> f64 {
        let mut acc = self.cross_entropy * weights.cross_entropy;
        for (v, w) in self.array().iter().zip(weights.array()).skip(1) {
            if w != 0.0 {
                acc += v * w;
            }
        }
        acc
    }
}

/// One validation row.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub epoch: usize,
    pub step: usize,
    /// Mean of each training term since the previous row.
    pub train: LossTerms,
    /// `train.total(weights)`.
    pub train_total: f64,
    pub val_iid: EvalResult,
    pub val_ood: EvalResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub seed: u64,
    pub model: ModelKind,
    pub rows: Vec<EvalRow>,
    pub steps: usize,
    /// Row with the lowest i.i.d validation loss.
    pub best_row: usize,
    /// Final i.i.d validation loss minus its minimum over the run.
    pub overfit_gap: f64,
    /// First step whose i.i.d validation accuracy reached the threshold.
    pub steps_to_threshold: Option<usize>,
    pub test_iid: EvalResult,
    pub test_ood: EvalResult,
    /// Probabilities that hit the log floor in the training cross-entropy.
    pub clamped_probs: usize,
    /// CT only: reconstruction error at initialisation and after the
    /// reconstruction pretraining stage.
    pub ct_recon: Option<(f64, f64)>,
    pub wall_time_secs: f64,
}

pub const CSV_HEADER: &str = "epoch,step,train_total,train_cross_entropy,train_recon,train_weight_func,\
train_kl_input,train_kl_context,train_kl_weights,val_iid_loss,val_iid_accuracy,val_ood_loss,val_ood_accuracy";

impl RunMetrics {
    /// One line per validation row. Contains no timing, so identical runs
    /// give identical files.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let t = &r.train;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.step,
                r.train_total,
                t.cross_entropy,
                t.recon,
                t.weight_func,
                t.kl_input,
                t.kl_context,
                t.kl_weights,
                r.val_iid.loss,
                r.val_iid.accuracy,
                r.val_ood.loss,
                r.val_ood.accuracy
            );
        }
        out
    }

    /// `key = value` summary of the run.
    pub fn summary(&self) -> String {
        let best = &self.rows[self.best_row];
        let mut out = String::new();
        let _ = writeln!(out, "model = {}", self.model.as_str());
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "steps = {}", self.steps);
        let _ = writeln!(out, "best_step = {}", best.step);
        let _ = writeln!(out, "best_val_iid_loss = {}", best.val_iid.loss);
        let _ = writeln!(out, "overfit_gap = {}", self.overfit_gap);
        let threshold = self.steps_to_threshold.map_or("none".to_string(), |s| s.to_string());
        let _ = writeln!(out, "steps_to_threshold = {threshold}");
        let _ = writeln!(out, "test_iid_accuracy = {}", self.test_iid.accuracy);
        let _ = writeln!(out, "test_iid_loss = {}", self.test_iid.loss);
        let _ = writeln!(out, "test_ood_accuracy = {}", self.test_ood.accuracy);
        let _ = writeln!(out, "test_ood_loss = {}", self.test_ood.loss);
        let _ = writeln!(out, "clamped_probs = {}", self.clamped_probs);
        if let Some((before, after)) = self.ct_recon {
            let _ = writeln!(out, "ct_recon_init = {before}");
            let _ = writeln!(out, "ct_recon_pretrained = {after}");
        }
        let _ = writeln!(out, "wall_time_secs = {:.3}", self.wall_time_secs);
        out
    }
}

pub struct TrainOutput {
    pub metrics: RunMetrics,
    /// Model after the last step.
    pub model: AnyModel,
    /// Parameters at the lowest i.i.d validation loss.
    pub best: Checkpoint,
}

/// Batches of one epoch: a fresh permutation from the shuffle stream, cut
/// into `batch_size` pieces. A trailing single example is dropped because
/// batch normalisation cannot train on it.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream_indexed(seed, Stream::Shuffle, epoch as u64));
    order.chunks(batch_size).filter(|c| c.len() >= 2).map(|c| c.to_vec()).collect()
}

fn diverged(e: Error) -> Error {
    match e {
        Error::Autodiff(AutodiffError::NonFinite { op }) => Error::Diverged { tensor: format!("output of {op}") },
        e => e,
    }
}

fn check_finite(store: &ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
    for id in store.ids() {
        if let Some(Some(g)) = grads.get(id.index()) {
            if !g.is_finite() {
                return Err(Error::Diverged { tensor: format!("gradient of {}", store.name(id)) });
            }
        }
    }
    Ok(())
}

fn check_params(store: &ParamStore) -> Result<()> {
    match store.ids().find(|&id| !store.get(id).is_finite()) {
        Some(id) => Err(Error::Diverged { tensor: store.name(id).to_string() }),
        None => Ok(()),
    }
}

/// Mutable state of one run.
struct Run<'a> {
    cfg: &'a ExperimentConfig,
    bundle: &'a DatasetBundle,
    model: AnyModel,
    opt: Optimizer,
    contexts: rand_chacha::ChaCha8Rng,
    enc_noise: RngNoise,
    weight_noise: RngNoise,
    clamped: usize,
}

impl Run<'_> {
    fn context_batch(&mut self) -> Result<(Tensor, Vec<usize>)> {
        let train = &self.bundle.train;
        let idx = sample_context_indices(train.len(), self.cfg.n, &mut self.contexts)?;
        Ok((train.inputs.select_rows(&idx)?, idx.iter().map(|&i| train.labels[i]).collect()))
    }

    /// One optimiser step on `batch`; returns the loss terms.
    fn step(&mut self, batch: &Split) -> Result<LossTerms> {
        let cfg = self.cfg;
        let k = self.model.classes();
        let y = one_hot(&batch.labels, k);
        let needs_contexts = self.model.kind() != ModelKind::Point;
        let (ctx, ctx_labels) = if needs_contexts { self.context_batch()? } else { (Tensor::zeros(&[0]), vec![]) };
        let tape = Tape::new();
        let store = self.model.store().clone();
        let mut b = Binder::new(&tape, &store);
        let (loss, terms) = match &self.model {
            AnyModel::Cib(m) => {
                let mut noise = NoiseStreams { encoder: &mut self.enc_noise, weights: &mut self.weight_noise };
                let out = cib_forward(m, &mut b, &batch.inputs, &ctx, BnMode::Train, cfg, &mut noise)?;
                let mixed = mix_labels(&y, &one_hot(&ctx_labels, k), cfg.alpha)?;
                let (loss, bd) = total_loss(&out, &mixed, cfg)?;
                self.clamped += bd.clamped;
                let terms = LossTerms {
                    cross_entropy: bd.cross_entropy,
                    weight_func: bd.weight_func,
                    kl_input: bd.kl_input_repr,
                    kl_context: bd.kl_context_repr,
                    kl_weights: bd.kl_weights,
                    ..Default::default()
                };
                (loss, terms)
            }
            AnyModel::Point(m) => {
                let (_, logits) = pointwise_forward(m, &mut b, &batch.inputs, BnMode::Train)?;
                let loss = logits.softmax_cross_entropy(&y)?;
                (loss, LossTerms { cross_entropy: loss.item(), ..Default::default() })
            }
            AnyModel::Ct(m) => {
                let out = ct_forward(m, &mut b, &batch.inputs, &ctx, BnMode::Train, &mut self.enc_noise)?;
                let (loss, bd) = ct_loss(&out, &y, CtWeights::from_config(cfg)?)?;
                let terms =
                    LossTerms { cross_entropy: bd.cross_entropy, recon: bd.recon, kl_input: bd.kl, ..Default::default() };
                (loss, terms)
            }
        };
        debug_assert_eq!(terms.total(&LossTerms::weights(cfg)), loss.item());
        tape.backward(loss)?;
        let grads = b.grads();
        let updates = b.take_buffer_updates();
        drop(b);
        check_finite(&store, &grads)?;
        let params = self.model.store_mut();
        apply_buffer_updates(params, updates)?;
        self.opt.step(params, &grads)?;
        check_params(params)?;
        Ok(terms)
    }

    fn validate(&self) -> Result<(EvalResult, EvalResult)> {
        let pool = &self.bundle.train.inputs;
        let iid = evaluate(&self.model, &self.bundle.val_iid, pool, EvalMode::Iid, self.cfg, self.cfg.seed)?;
        let ood = evaluate(&self.model, &self.bundle.val_ood, pool, EvalMode::Ood, self.cfg, self.cfg.seed)?;
        Ok((iid, ood))
    }
}

const RECON_PROBE: usize = 256;

/// Reconstruction error of the CT autoencoder at its posterior mean on the
/// first training examples.
pub fn ct_recon_error(model: &CtModel, train: &Split) -> Result<f64> {
    let n = train.len().min(RECON_PROBE);
    let x = train.inputs.select_rows(&(0..n).collect::<Vec<_>>())?;
    let tape = Tape::new();
    let mut b = Binder::new(&tape, &model.store);
    let weights = CtWeights { ce: 1.0, recon: 1.0, kl: 0.0 };
    let (_, recon) = model.vae_loss(&mut b, &x, weights, &mut ZeroNoise)?;
    Ok(recon)
}

/// Stage one of CT training: the autoencoder alone, on reconstruction.
fn ct_pretrain(run: &mut Run<'_>) -> Result<(f64, f64)> {
    let AnyModel::Ct(m) = &run.model else { unreachable!("ct_pretrain on a non-CT model") };
    let before = ct_recon_error(m, &run.bundle.train)?;
    let weights = CtWeights::from_config(run.cfg)?;
    let mut opt = Optimizer::new(run.cfg.optimizer, run.cfg.effective_lr(), run.cfg.weight_decay);
    let vae_part = |name: &str| name.starts_with("encoder.") || name.starts_with("decoder.");
    for epoch in 0..run.cfg.ct_pretrain_epochs {
        for idx in epoch_batches(run.bundle.train.len(), run.cfg.batch_size, run.cfg.seed ^ 0xc7, epoch) {
            let batch = run.bundle.train.subset(&idx)?;
            let AnyModel::Ct(m) = &mut run.model else { unreachable!() };
            let tape = Tape::new();
            let store = m.store.clone();
            let mut b = Binder::new(&tape, &store);
            let (loss, _) = m.vae_loss(&mut b, &batch.inputs, weights, &mut run.enc_noise)?;
            tape.backward(loss)?;
            let grads = b.grads();
            let updates = b.take_buffer_updates();
            drop(b);
            check_finite(&store, &grads)?;
            apply_buffer_updates(&mut m.store, updates)?;
            opt.step_where(&mut m.store, &grads, vae_part)?;
            check_params(&m.store)?;
        }
    }
    let AnyModel::Ct(m) = &run.model else { unreachable!() };
    Ok((before, ct_recon_error(m, &run.bundle.train)?))
}

/// Trains a freshly initialised `cfg.model` on `bundle`.
pub fn train(cfg: &ExperimentConfig, bundle: &DatasetBundle) -> Result<TrainOutput> {
    cfg.validate()?;
    let model = AnyModel::new(cfg, bundle.input_shape(), bundle.classes())?;
    train_model(model, cfg, bundle)
}

/// Runs the epoch loop on `model`: per step sample contexts, forward, mix
/// labels, loss, backward and optimiser step; validate on the configured
/// cadence; evaluate both test splits at the end.
pub fn train_model(model: AnyModel, cfg: &ExperimentConfig, bundle: &DatasetBundle) -> Result<TrainOutput> {
    cfg.validate()?;
    if model.kind() != cfg.model {
        return Err(Error::Config(format!("model: config says {}, got {}", cfg.model.as_str(), model.kind().as_str())));
    }
    if bundle.train.len() < cfg.n {
        return Err(Error::Data(format!("n: {} contexts from {} training examples", cfg.n, bundle.train.len())));
    }
    let start = Instant::now();
    let weights = LossTerms::weights(cfg);
    let mut run = Run {
        cfg,
        bundle,
        opt: Optimizer::new(cfg.optimizer, cfg.effective_lr(), cfg.weight_decay),
        model,
        contexts: substream(cfg.seed, Stream::Contexts),
        enc_noise: RngNoise::new(cfg.seed, Stream::EncoderNoise),
        weight_noise: RngNoise::new(cfg.seed, Stream::WeightNoise),
        clamped: 0,
    };
    let ct_recon = if run.model.kind() == ModelKind::Ct && cfg.ct_pretrain_epochs > 0 {
        Some(ct_pretrain(&mut run).map_err(diverged)?)
    } else {
        None
    };

    let mut rows: Vec<EvalRow> = Vec::new();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut acc = [0.0; 6];
    let mut since = 0usize;
    let mut step = 0usize;
    let mut record = |run: &Run<'_>, epoch: usize, step: usize, acc: &mut [f64; 6], since: &mut usize| -> Result<()> {
        let n = (*since).max(1) as f64;
        let train = LossTerms::from_array(acc.map(|v| v / n));
        let (val_iid, val_ood) = run.validate()?;
        if best.as_ref().is_none_or(|(l, _)| val_iid.loss < *l) {
            best = Some((val_iid.loss, run.model.store().clone()));
        }
        rows.push(EvalRow { epoch, step, train_total: train.total(&weights), train, val_iid, val_ood });
        *acc = [0.0; 6];
        *since = 0;
        Ok(())
    };
    for epoch in 0..cfg.epochs {
        for idx in epoch_batches(bundle.train.len(), cfg.batch_size, cfg.seed, epoch) {
            let batch = bundle.train.subset(&idx)?;
            let terms = run.step(&batch).map_err(diverged)?;
            for (a, v) in acc.iter_mut().zip(terms.array()) {
                *a += v;
            }
            since += 1;
            step += 1;
            if cfg.eval_every_steps > 0 && step % cfg.eval_every_steps == 0 {
                record(&run, epoch, step, &mut acc, &mut since)?;
            }
        }
        if cfg.eval_every_steps == 0 || (epoch + 1 == cfg.epochs && (since > 0 || step == 0)) {
            record(&run, epoch, step, &mut acc, &mut since)?;
        }
    }
    drop(record);

    let best_row = rows
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.val_iid.loss.total_cmp(&b.1.val_iid.loss))
        .map(|(i, _)| i)
        .expect("at least one row");
    let min_loss = rows[best_row].val_iid.loss;
    let overfit_gap = rows.last().expect("rows").val_iid.loss - min_loss;
    let steps_to_threshold = rows.iter().find(|r| r.val_iid.accuracy >= cfg.accuracy_threshold).map(|r| r.step);
    let pool = &bundle.train.inputs;
    let test_iid = evaluate(&run.model, &bundle.test_iid, pool, EvalMode::Iid, cfg, cfg.seed)?;
    let test_ood = evaluate(&run.model, &bundle.test_ood, pool, EvalMode::Ood, cfg, cfg.seed)?;
    let metrics = RunMetrics {
        seed: cfg.seed,
        model: cfg.model,
        rows,
        steps: step,
        best_row,
        overfit_gap,
        steps_to_threshold,
        test_iid,
        test_ood,
        clamped_probs: run.clamped,
        ct_recon,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    let mut best_ckpt = run.model.checkpoint(cfg);
    if let Some((_, store)) = best {
        best_ckpt.params = store;
    }
    Ok(TrainOutput { metrics, model: run.model, best: best_ckpt })
}
