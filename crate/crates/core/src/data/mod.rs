//! Synthetic domain-shift data: confounded generators, translation
//! perturbation, context sampling and the bundle file format.

mod confounded;
mod perturb;

use std::path::Path;

use rand::Rng;

pub use confounded::{
    class_layout, gen_confounded, render, sample_latents, ConfoundedSpec, Latents, Render, IMAGE_CHANNELS,
};
pub use perturb::{draw_offsets, max_offset, translate_perturb, translate_with_offsets};

use crate::autodiff::Tensor;
use crate::binio::{put_u32, Reader};
use crate::error::{Error, FormatError, Result};
use crate::model::InputShape;

/// Inputs with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Split> {
        Ok(Split { inputs: self.inputs.select_rows(idx)?, labels: idx.iter().map(|&i| self.labels[i]).collect() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub spec: ConfoundedSpec,
    pub seed: u64,
    pub train: Split,
    pub val_iid: Split,
    pub test_iid: Split,
    pub val_ood: Split,
    pub test_ood: Split,
}

impl DatasetBundle {
    pub fn input_shape(&self) -> InputShape {
        self.spec.input_shape()
    }

    pub fn classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn split(&self, name: &str) -> Result<&Split> {
        Ok(match name {
            "train" => &self.train,
            "val_iid" => &self.val_iid,
            "test_iid" => &self.test_iid,
            "val_ood" => &self.val_ood,
            "test_ood" => &self.test_ood,
            _ => return Err(Error::Data(format!("unknown split {name:?}"))),
        })
    }

    fn splits(&self) -> [&Split; 5] {
        [&self.train, &self.val_iid, &self.test_iid, &self.val_ood, &self.test_ood]
    }
}

/// `[n, k]` one-hot rows.
pub fn one_hot(labels: &[usize], k: usize) -> Tensor {
    Tensor::from_fn(&[labels.len(), k], |i| if labels[i / k] == i % k { 1.0 } else { 0.0 })
}

/// `n` distinct indices drawn uniformly from `0..pool`. Labels are not
/// consulted, so a context may carry any class.
pub fn sample_context_indices(pool: usize, n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if n > pool {
        return Err(Error::Data(format!("cannot draw {n} contexts from a pool of {pool}")));
    }
    if n == 0 {
        return Err(Error::Config("n: no context samples".into()));
    }
    Ok(rand::seq::index::sample(rng, pool, n).into_vec())
}

/// Context inputs and their one-hot labels.
pub fn sample_context(train: &Split, n: usize, k: usize, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
    let idx = sample_context_indices(train.len(), n, rng)?;
    let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
    Ok((train.inputs.select_rows(&idx)?, one_hot(&labels, k)))
}

const MAGIC: [u8; 4] = *b"CIBD";
const VERSION: u32 = 1;

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

impl DatasetBundle {
    /// Layout: magic, version, header (seed, spec counts and floats, render
    /// kind and sides), then per split a `u32` count, `f32` inputs and `u16`
    /// labels, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.spec;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        put_u32(&mut out, VERSION);
        out.extend_from_slice(&self.seed.to_le_bytes());
        for v in [s.num_classes, s.invariant_dim, s.nuisance_dim, s.train_size, s.val_size, s.test_size] {
            put_u32(&mut out, v as u32);
        }
        for v in [s.train_correlation, s.ood_correlation, s.noise_std, s.separation, s.nuisance_scale, s.ood_shift_level] {
            put_f64(&mut out, v);
        }
        let (kind, h, w) = match s.render {
            Render::Vector => (0u8, 0, 0),
            Render::Image { height, width } => (1u8, height as u32, width as u32),
        };
        out.push(kind);
        put_u32(&mut out, h);
        put_u32(&mut out, w);
        for split in self.splits() {
            put_u32(&mut out, split.len() as u32);
            for v in split.inputs.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            for &l in &split.labels {
                out.extend_from_slice(&(l as u16).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> std::result::Result<Self, FormatError> {
        let mut r = Reader::new(buf);
        r.magic(MAGIC)?;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion { found: version, supported: VERSION });
        }
        let seed = r.u64("header")?;
        let mut counts = [0usize; 6];
        for c in counts.iter_mut() {
            *c = r.u32("header")? as usize;
        }
        let mut floats = [0f64; 6];
        for f in floats.iter_mut() {
            *f = r.f64("header")?;
        }
        let render = match r.u8("header")? {
            0 => {
                r.u32("header")?;
                r.u32("header")?;
                Render::Vector
            }
            1 => Render::Image { height: r.u32("header")? as usize, width: r.u32("header")? as usize },
            k => return Err(FormatError::Malformed(format!("unknown render kind {k}"))),
        };
        let [num_classes, invariant_dim, nuisance_dim, train_size, val_size, test_size] = counts;
        let [train_correlation, ood_correlation, noise_std, separation, nuisance_scale, ood_shift_level] = floats;
        let spec = ConfoundedSpec {
            num_classes,
            invariant_dim,
            nuisance_dim,
            train_correlation,
            ood_correlation,
            train_size,
            val_size,
            test_size,
            noise_std,
            render,
            separation,
            nuisance_scale,
            ood_shift_level,
        };
        spec.validate().map_err(|e| FormatError::Malformed(format!("header: {e}")))?;
        let shape = spec.input_shape();
        let mut read_split = |what: &'static str| -> std::result::Result<Split, FormatError> {
            let n = r.u32(what)? as usize;
            let flat = shape.flat();
            let bytes = r.take(n.checked_mul(flat * 4).ok_or(FormatError::Truncated(what))?, what)?;
            let data: Vec<f64> =
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let l = r.u16(what)? as usize;
                if l >= num_classes {
                    return Err(FormatError::Malformed(format!("{what}: label {l} with {num_classes} classes")));
                }
                labels.push(l);
            }
            if n == 0 {
                return Err(FormatError::Malformed(format!("{what}: empty split")));
            }
            let inputs = Tensor::new(&shape.batch(n), data).map_err(|e| FormatError::Malformed(e.to_string()))?;
            Ok(Split { inputs, labels })
        };
        let bundle = DatasetBundle {
            spec: spec.clone(),
            seed,
            train: read_split("train split")?,
            val_iid: read_split("val_iid split")?,
            test_iid: read_split("test_iid split")?,
            val_ood: read_split("val_ood split")?,
            test_ood: read_split("test_ood split")?,
        };
        r.finish()?;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_bytes(&std::fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{substream, Stream};

    fn small_spec() -> ConfoundedSpec {
        ConfoundedSpec { train_size: 40, val_size: 12, test_size: 12, ..Default::default() }
    }

    #[test]
    fn bundle_round_trip_is_exact() {
        for render in [Render::Vector, Render::Image { height: 8, width: 8 }] {
            let spec = ConfoundedSpec { render, ood_shift_level: if render == Render::Vector { 0.0 } else { 0.25 }, ..small_spec() };
            let b = gen_confounded(&spec, 3).unwrap();
            let back = DatasetBundle::from_bytes(&b.to_bytes()).unwrap();
            assert_eq!(back, b);
        }
    }

    #[test]
    fn format_errors() {
        let bytes = gen_confounded(&small_spec(), 3).unwrap().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(DatasetBundle::from_bytes(&bad), Err(FormatError::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(DatasetBundle::from_bytes(&bad), Err(FormatError::UnsupportedVersion { found: 9, .. })));
        assert!(matches!(DatasetBundle::from_bytes(&bytes[..bytes.len() - 3]), Err(FormatError::Truncated(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(DatasetBundle::from_bytes(&extra), Err(FormatError::Malformed(_))));
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = gen_confounded(&small_spec(), 8).unwrap().to_bytes();
        let b = gen_confounded(&small_spec(), 8).unwrap().to_bytes();
        let c = gen_confounded(&small_spec(), 9).unwrap().to_bytes();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn full_context_draw_is_a_permutation() {
        let mut idx = sample_context_indices(7, 7, &mut substream(0, Stream::Contexts)).unwrap();
        idx.sort();
        assert_eq!(idx, (0..7).collect::<Vec<_>>());
        assert!(sample_context_indices(3, 4, &mut substream(0, Stream::Contexts)).is_err());
    }

    #[test]
    fn context_classes_are_balanced() {
        let spec = ConfoundedSpec { train_size: 400, ..small_spec() };
        let b = gen_confounded(&spec, 2).unwrap();
        let mut counts = [0usize; 4];
        let mut rng = substream(4, Stream::Contexts);
        for _ in 0..10_000 {
            for i in sample_context_indices(b.train.len(), 1, &mut rng).unwrap() {
                counts[b.train.labels[i]] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((f - 0.25).abs() <= 0.02, "frequency {f}");
        }
    }

    #[test]
    fn fixed_seed_fixes_contexts() {
        let a = sample_context_indices(100, 8, &mut substream(6, Stream::Contexts)).unwrap();
        let b = sample_context_indices(100, 8, &mut substream(6, Stream::Contexts)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn one_hot_rows() {
        assert_eq!(one_hot(&[2, 0], 3).data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }
}
