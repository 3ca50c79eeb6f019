use rand::Rng;

use super::{Binder, ParamId, ParamKind, ParamStore};
use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

fn uniform_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Point-estimate affine layer, `y = x Wᵀ + b` with `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, path: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{path}.weight"), ParamKind::Weight, uniform_init(rng, &[out_dim, in_dim], in_dim));
        let bias = store.add(format!("{path}.bias"), ParamKind::Weight, uniform_init(rng, &[out_dim], in_dim));
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn forward<'t>(&self, b: &mut Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::Shape(format!("linear expects [batch, {}], got {shape:?}", self.in_dim)));
        }
        let w = b.var(self.weight)?;
        let bias = b.var(self.bias)?;
        Ok(x.matmul(w.transpose()?)?.add(bias)?)
    }
}

/// Stride-1 convolution with `same`-style zero padding for odd kernels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        path: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(
            format!("{path}.weight"),
            ParamKind::Weight,
            uniform_init(rng, &[out_ch, in_ch, kernel, kernel], fan_in),
        );
        let bias = store.add(format!("{path}.bias"), ParamKind::Weight, uniform_init(rng, &[out_ch], fan_in));
        Conv2d { weight, bias, in_ch, out_ch, kernel, pad: kernel / 2 }
    }

    pub fn forward<'t>(&self, b: &mut Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let w = b.var(self.weight)?;
        let bias = b.var(self.bias)?.reshape(&[1, self.out_ch, 1, 1])?;
        Ok(x.conv2d(w, self.pad)?.add(bias)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_check, Tape};
    use crate::noise::{substream, Stream};

    #[test]
    fn linear_matches_manual_affine() {
        let mut store = ParamStore::new();
        let mut rng = substream(1, Stream::Init);
        let lin = Linear::new(&mut store, "fc", 3, 2, &mut rng);
        let x = Tensor::new(&[1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let tape = Tape::new();
        let mut b = Binder::new(&tape, &store);
        let xv = b.constant(x.clone()).unwrap();
        let y = lin.forward(&mut b, xv).unwrap().value();
        let (w, bias) = (store.get(lin.weight), store.get(lin.bias));
        for o in 0..2 {
            let manual: f64 = (0..3).map(|i| w.data()[o * 3 + i] * x.data()[i]).sum::<f64>() + bias.data()[o];
            assert!((y.data()[o] - manual).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_rejects_wrong_width() {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "fc", 3, 2, &mut substream(1, Stream::Init));
        let tape = Tape::new();
        let mut b = Binder::new(&tape, &store);
        let x = b.constant(Tensor::zeros(&[2, 4])).unwrap();
        assert!(lin.forward(&mut b, x).is_err());
    }

    #[test]
    fn conv_gradient_wrt_input() {
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "c", 2, 3, 3, &mut substream(2, Stream::Init));
        let mut rng = substream(3, Stream::Data);
        let x = Tensor::from_fn(&[2, 2, 4, 4], |_| rng.random_range(-1.0..1.0));
        let r = finite_difference_check(
            |tape, x| {
                let mut b = Binder::new(tape, &store);
                Ok::<_, Error>(conv.forward(&mut b, x)?.silu()?.sum()?)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
