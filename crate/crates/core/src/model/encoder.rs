use rand::Rng;

use super::config::EncoderKind;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Binder, BnMode, Conv2d, Linear, ParamStore, LOG_VAR_MAX, LOG_VAR_MIN};

/// Per-example input layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputShape {
    Vector(usize),
    Image { channels: usize, height: usize, width: usize },
}

impl InputShape {
    pub fn flat(&self) -> usize {
        match *self {
            InputShape::Vector(d) => d,
            InputShape::Image { channels, height, width } => channels * height * width,
        }
    }

    /// Shape of a batch of `b` examples.
    pub fn batch(&self, b: usize) -> Vec<usize> {
        match *self {
            InputShape::Vector(d) => vec![b, d],
            InputShape::Image { channels, height, width } => vec![b, channels, height, width],
        }
    }
}

const CNN_CHANNELS: [usize; 2] = [8, 16];

#[derive(Debug, Clone)]
enum Body {
    Mlp { first: Linear, bn: BatchNorm, second: Linear },
    Cnn { conv1: Conv2d, bn1: BatchNorm, conv2: Conv2d, bn2: BatchNorm, dense: Linear },
}

/// Point-estimate network emitting the mean and log-variance of a
/// `repr_dim`-dimensional Gaussian representation.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub input: InputShape,
    pub repr_dim: usize,
    body: Body,
    /// Final layer: rows `0..repr_dim` give the mean, the rest the log-variance.
    pub head: Linear,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        path: &str,
        kind: EncoderKind,
        input: InputShape,
        hidden: usize,
        repr_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let body = match kind {
            EncoderKind::Mlp => Body::Mlp {
                first: Linear::new(store, &format!("{path}.fc1"), input.flat(), hidden, rng),
                bn: BatchNorm::new(store, &format!("{path}.bn1"), hidden),
                second: Linear::new(store, &format!("{path}.fc2"), hidden, hidden, rng),
            },
            EncoderKind::Cnn => {
                let InputShape::Image { channels, height, width } = input else {
                    return Err(Error::Config("encoder_kind: cnn needs image inputs".into()));
                };
                if height % 4 != 0 || width % 4 != 0 {
                    return Err(Error::Config(format!(
                        "encoder_kind: cnn needs image sides divisible by 4, got {height}x{width}"
                    )));
                }
                let [c1, c2] = CNN_CHANNELS;
                Body::Cnn {
                    conv1: Conv2d::new(store, &format!("{path}.conv1"), channels, c1, 3, rng),
                    bn1: BatchNorm::new(store, &format!("{path}.bn1"), c1),
                    conv2: Conv2d::new(store, &format!("{path}.conv2"), c1, c2, 3, rng),
                    bn2: BatchNorm::new(store, &format!("{path}.bn2"), c2),
                    dense: Linear::new(store, &format!("{path}.fc1"), c2 * (height / 4) * (width / 4), hidden, rng),
                }
            }
        };
        let head = Linear::new(store, &format!("{path}.head"), hidden, 2 * repr_dim, rng);
        Ok(Encoder { input, repr_dim, body, head })
    }

    /// Returns `(mean, log_var)`, each `[batch, repr_dim]`; the log-variance
    /// is clamped to the same range as the Bayesian weights.
    pub fn forward<'t>(&self, b: &mut Binder<'t, '_>, x: Var<'t>, mode: BnMode) -> Result<(Var<'t>, Var<'t>)> {
        let shape = x.shape();
        let batch = shape[0];
        if shape != self.input.batch(batch) {
            return Err(Error::Shape(format!("encoder expects {:?}, got {shape:?}", self.input.batch(batch))));
        }
        let h = match &self.body {
            Body::Mlp { first, bn, second } => {
                let flat = x.reshape(&[batch, self.input.flat()])?;
                let h = first.forward(b, flat)?;
                let h = bn.forward(b, h, mode)?.silu()?;
                second.forward(b, h)?.silu()?
            }
            Body::Cnn { conv1, bn1, conv2, bn2, dense } => {
                let h = conv1.forward(b, x)?;
                let h = bn1.forward(b, h, mode)?.silu()?.max_pool2d(2)?;
                let h = conv2.forward(b, h)?;
                let h = bn2.forward(b, h, mode)?.silu()?.max_pool2d(2)?;
                let width = h.value().numel() / batch;
                dense.forward(b, h.reshape(&[batch, width])?)?.silu()?
            }
        };
        let out = self.head.forward(b, h)?;
        let mean = out.narrow(1, 0, self.repr_dim)?;
        let log_var = out.narrow(1, self.repr_dim, self.repr_dim)?.clamp(LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok((mean, log_var))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};
    use crate::noise::{substream, Stream};

    #[test]
    fn output_shapes_for_both_kinds() {
        let cases = [
            (EncoderKind::Mlp, InputShape::Vector(6)),
            (EncoderKind::Mlp, InputShape::Image { channels: 3, height: 4, width: 4 }),
            (EncoderKind::Cnn, InputShape::Image { channels: 3, height: 8, width: 8 }),
        ];
        for (kind, input) in cases {
            let mut store = ParamStore::new();
            let enc = Encoder::new(&mut store, "enc", kind, input, 10, 5, &mut substream(1, Stream::Init)).unwrap();
            let tape = Tape::new();
            let mut b = Binder::new(&tape, &store);
            let x = b.constant(Tensor::from_fn(&input.batch(3), |i| (i as f64 * 0.37).sin())).unwrap();
            let (m, lv) = enc.forward(&mut b, x, BnMode::Train).unwrap();
            assert_eq!(m.shape(), vec![3, 5]);
            assert_eq!(lv.shape(), vec![3, 5]);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut store = ParamStore::new();
        let rng = &mut substream(1, Stream::Init);
        assert!(Encoder::new(&mut store, "a", EncoderKind::Cnn, InputShape::Vector(4), 4, 2, rng).is_err());
        let odd = InputShape::Image { channels: 1, height: 6, width: 6 };
        assert!(Encoder::new(&mut store, "b", EncoderKind::Cnn, odd, 4, 2, rng).is_err());
        let enc = Encoder::new(&mut store, "c", EncoderKind::Mlp, InputShape::Vector(4), 4, 2, rng).unwrap();
        let tape = Tape::new();
        let mut b = Binder::new(&tape, &store);
        let x = b.constant(Tensor::zeros(&[2, 5])).unwrap();
        assert!(matches!(enc.forward(&mut b, x, BnMode::Train), Err(Error::Shape(_))));
    }
}
