//! Randomness plumbing: named substreams of one master seed, and noise
//! sources for the reparameterised samplers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;

/// Independent random streams derived from a master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Contexts = 2,
    EncoderNoise = 3,
    WeightNoise = 4,
    Init = 5,
    Shuffle = 6,
    Eval = 7,
    Perturb = 8,
}

/// RNG for `stream` under `seed`.
pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    substream_indexed(seed, stream, 0)
}

/// RNG for the `index`-th instance of `stream` (for example one per epoch).
pub fn substream_indexed(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(index.wrapping_add(0x5eed))));
    rng.set_stream(stream as u64);
    rng
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Supplies standard-normal noise tensors to samplers.
pub trait NoiseSource {
    fn standard_normal(&mut self, shape: &[usize]) -> Tensor;
}

/// Fresh draws from a seeded generator.
pub struct RngNoise(pub ChaCha8Rng);

impl RngNoise {
    pub fn new(seed: u64, stream: Stream) -> Self {
        RngNoise(substream(seed, stream))
    }
}

impl NoiseSource for RngNoise {
    fn standard_normal(&mut self, shape: &[usize]) -> Tensor {
        let rng = &mut self.0;
        Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
    }
}

/// All-zero noise: samplers return their means.
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn standard_normal(&mut self, shape: &[usize]) -> Tensor {
        Tensor::zeros(shape)
    }
}

/// Draws from an inner source and keeps a copy of every tensor handed out.
pub struct RecordingNoise<S> {
    inner: S,
    pub recorded: Vec<Tensor>,
}

impl<S: NoiseSource> RecordingNoise<S> {
    pub fn new(inner: S) -> Self {
        RecordingNoise { inner, recorded: Vec::new() }
    }
}

impl<S: NoiseSource> NoiseSource for RecordingNoise<S> {
    fn standard_normal(&mut self, shape: &[usize]) -> Tensor {
        let t = self.inner.standard_normal(shape);
        self.recorded.push(t.clone());
        t
    }
}

/// Replays a fixed sequence of tensors, which makes a stochastic forward
/// pass a deterministic function of its parameters.
#[derive(Clone)]
pub struct ReplayNoise {
    tensors: Vec<Tensor>,
    pos: usize,
}

impl ReplayNoise {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        ReplayNoise { tensors, pos: 0 }
    }
}

impl NoiseSource for ReplayNoise {
    fn standard_normal(&mut self, shape: &[usize]) -> Tensor {
        let t = self.tensors.get(self.pos).expect("replay noise exhausted").clone();
        assert_eq!(t.shape(), shape, "replay noise shape");
        self.pos += 1;
        t
    }
}

/// Noise sources for the two stochastic parts of a model.
pub struct NoiseStreams<'a> {
    pub encoder: &'a mut dyn NoiseSource,
    pub weights: &'a mut dyn NoiseSource,
}
