//! The CIB architecture: a shared variational encoder whose input and
//! context representations are summed and fed to a partially stochastic
//! inference network, trained with mixup targets, a weight-function
//! regulariser and KL terms.

mod cib;
mod config;
mod encoder;
mod loss;

use std::ops::Range;

pub use cib::{cib_forward, predict, CibModel, CibOutput, InferenceNet};
pub use config::{EncoderKind, ExperimentConfig, ModelKind, OptimizerKind, MAX_WEIGHT_SAMPLES};
pub use encoder::{Encoder, InputShape};
pub use loss::{mix_labels, probs_cross_entropy, total_loss, weight_func_reg, LossBreakdown, PROB_FLOOR};

use crate::error::{Error, Result};
use crate::nn::BnMode;

/// Splits `0..n` into chunks of at most `size`. In batch-statistics modes a
/// trailing single example is folded into the previous chunk.
pub fn eval_chunks(n: usize, size: usize, mode: BnMode) -> Result<Vec<Range<usize>>> {
    if n == 0 {
        return Err(Error::Data("empty split".into()));
    }
    if mode != BnMode::EvalIid && n < 2 {
        return Err(Error::BatchTooSmall { mode: "eval_ood", got: n });
    }
    let size = size.max(2);
    let mut out: Vec<Range<usize>> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if mode != BnMode::EvalIid && out.len() > 1 && out.last().map_or(false, |r| r.len() == 1) {
        out.pop();
        out.last_mut().unwrap().end = n;
    }
    Ok(out)
}
