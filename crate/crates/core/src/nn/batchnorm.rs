use super::{Binder, ParamId, ParamKind, ParamStore};
use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

/// Which statistics batch normalisation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics accumulated during training.
    EvalIid,
    /// Statistics of the evaluation batch itself, for shifted test
    /// distributions. Running statistics are left alone.
    EvalOod,
}

impl BnMode {
    fn name(self) -> &'static str {
        match self {
            BnMode::Train => "train",
            BnMode::EvalIid => "eval_iid",
            BnMode::EvalOod => "eval_ood",
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-feature (`[B, F]`) or per-channel (`[B, C, H, W]`) normalisation.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, path: &str, channels: usize) -> Self {
        BatchNorm {
            scale: store.add(format!("{path}.scale"), ParamKind::Weight, Tensor::ones(&[channels])),
            shift: store.add(format!("{path}.shift"), ParamKind::Weight, Tensor::zeros(&[channels])),
            running_mean: store.add(format!("{path}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[channels])),
            running_var: store.add(format!("{path}.running_var"), ParamKind::Buffer, Tensor::ones(&[channels])),
            channels,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn forward<'t>(&self, b: &mut Binder<'t, '_>, x: Var<'t>, mode: BnMode) -> Result<Var<'t>> {
        let shape = x.shape();
        let bshape: Vec<usize> = match shape.len() {
            2 if shape[1] == self.channels => vec![self.channels],
            4 if shape[1] == self.channels => vec![1, self.channels, 1, 1],
            _ => {
                return Err(Error::Shape(format!(
                    "batch norm over {} channels got input {shape:?}",
                    self.channels
                )))
            }
        };
        let batch = shape[0];
        let scale = b.var(self.scale)?.reshape(&bshape)?;
        let shift = b.var(self.shift)?.reshape(&bshape)?;

        let normalised = match mode {
            BnMode::EvalIid => {
                let rm = b.store().get(self.running_mean).reshaped(&bshape)?;
                let rv = b.store().get(self.running_var).reshaped(&bshape)?;
                let inv_std = rv.map(|v| 1.0 / (v + BN_EPS).sqrt());
                x.sub(b.constant(rm)?)?.mul(b.constant(inv_std)?)?
            }
            BnMode::Train | BnMode::EvalOod => {
                if batch < 2 {
                    return Err(Error::BatchTooSmall { mode: mode.name(), got: batch });
                }
                let mean = channel_mean(x)?;
                let centred = x.sub(mean.reshape(&bshape)?)?;
                let var = channel_mean(centred.square()?)?;
                let std = var.add_scalar(BN_EPS)?.sqrt()?;
                let normalised = centred.div(std.reshape(&bshape)?)?;
                if mode == BnMode::Train {
                    let count = (x.value().numel() / self.channels) as f64;
                    let m = self.momentum;
                    let old_mean = b.store().get(self.running_mean).clone();
                    let old_var = b.store().get(self.running_var).clone();
                    let (bm, bv) = (mean.value(), var.value());
                    let unbias = count / (count - 1.0);
                    let new_mean = Tensor::from_fn(&[self.channels], |i| (1.0 - m) * old_mean.data()[i] + m * bm.data()[i]);
                    let new_var =
                        Tensor::from_fn(&[self.channels], |i| (1.0 - m) * old_var.data()[i] + m * bv.data()[i] * unbias);
                    b.queue_buffer(self.running_mean, new_mean);
                    b.queue_buffer(self.running_var, new_var);
                }
                normalised
            }
        };
        Ok(normalised.mul(scale)?.add(shift)?)
    }
}

/// Mean over every axis except the channel axis (axis 1).
fn channel_mean(x: Var<'_>) -> Result<Var<'_>> {
    let shape = x.shape();
    Ok(match shape.len() {
        2 => x.mean_axis(0)?,
        _ => {
            let per_sample = x.mean_axis(0)?; // [C, H, W]
            per_sample.reshape(&[shape[1], shape[2] * shape[3]])?.mean_axis(1)?
        }
    })
}
