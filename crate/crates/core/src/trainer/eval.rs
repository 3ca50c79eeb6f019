use std::ops::Range;

use super::AnyModel;
use crate::autodiff::{Tape, Tensor};
use crate::baselines::{ct_forward, pointwise_forward};
use crate::data::{sample_context_indices, Split};
use crate::error::{Error, Result};
use crate::model::{eval_chunks, predict, ExperimentConfig, PROB_FLOOR};
use crate::nn::{Binder, BnMode};
use crate::noise::{substream, substream_indexed, RngNoise, Stream};

/// Which batch-norm statistics evaluation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Running statistics from training.
    Iid,
    /// Statistics of each evaluation batch.
    Ood,
}

impl EvalMode {
    pub fn bn_mode(self) -> BnMode {
        match self {
            EvalMode::Iid => BnMode::EvalIid,
            EvalMode::Ood => BnMode::EvalOod,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    /// Mean cross-entropy against the true labels, without mixup.
    pub loss: f64,
}

/// Class probabilities for every row of `inputs`. CIB and CT draw their N
/// contexts from `context_pool` (the training inputs); all randomness comes
/// from `seed`.
pub fn predict_probs(
    model: &AnyModel,
    inputs: &Tensor,
    context_pool: &Tensor,
    mode: EvalMode,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Tensor> {
    let bn = mode.bn_mode();
    match model {
        AnyModel::Cib(m) => Ok(predict(m, inputs, context_pool, cfg, bn, seed)?.1),
        AnyModel::Point(m) => chunked(inputs, cfg, bn, |x| {
            let tape = Tape::new();
            let mut b = Binder::new(&tape, &m.store);
            Ok(pointwise_forward(m, &mut b, x, bn)?.0.value())
        }),
        AnyModel::Ct(m) => {
            let mut ctx_rng = substream(seed, Stream::Contexts);
            let mut noise = RngNoise(substream_indexed(seed, Stream::Eval, 1));
            chunked(inputs, cfg, bn, |x| {
                let idx = sample_context_indices(context_pool.shape()[0], cfg.n, &mut ctx_rng)?;
                let ctx = context_pool.select_rows(&idx)?;
                let tape = Tape::new();
                let mut b = Binder::new(&tape, &m.store);
                Ok(ct_forward(m, &mut b, x, &ctx, bn, &mut noise)?.probs.value())
            })
        }
    }
}

fn chunked(
    inputs: &Tensor,
    cfg: &ExperimentConfig,
    mode: BnMode,
    mut f: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let mut parts = Vec::new();
    for Range { start, end } in eval_chunks(inputs.shape()[0], cfg.batch_size, mode)? {
        parts.push(f(&inputs.select_rows(&(start..end).collect::<Vec<_>>())?)?);
    }
    Ok(Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())?)
}

/// Accuracy and mean cross-entropy of `probs` against `labels`.
pub fn score(probs: &Tensor, labels: &[usize]) -> Result<EvalResult> {
    if labels.is_empty() {
        return Err(Error::Data("empty split".into()));
    }
    if probs.shape()[0] != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", probs.shape()[0], labels.len())));
    }
    let pred = probs.argmax_rows();
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    let loss = labels.iter().enumerate().map(|(i, &y)| -probs.row(i)[y].max(PROB_FLOOR).ln()).sum::<f64>();
    let n = labels.len() as f64;
    Ok(EvalResult { accuracy: correct as f64 / n, loss: loss / n })
}

pub fn evaluate(
    model: &AnyModel,
    split: &Split,
    context_pool: &Tensor,
    mode: EvalMode,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<EvalResult> {
    if split.is_empty() {
        return Err(Error::Data("empty split".into()));
    }
    let probs = predict_probs(model, &split.inputs, context_pool, mode, cfg, seed)?;
    score(&probs, &split.labels)
}
