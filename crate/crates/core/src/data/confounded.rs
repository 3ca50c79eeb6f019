use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::perturb::translate_perturb;
use super::{DatasetBundle, Split};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::kvfile::{self, parse_value, KvError};
use crate::model::InputShape;
use crate::noise::{substream_indexed, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Render {
    Vector,
    /// Three-channel image of the given side lengths.
    Image { height: usize, width: usize },
}

pub const IMAGE_CHANNELS: usize = 3;

/// Parameters of the synthetic domain-shift family.
///
/// Each example has a label `y`, invariant features `Z_R` drawn around a
/// class mean, and a nuisance code `s` that agrees with `y` at a split-level
/// correlation. Nuisance features `Z_S` are drawn around the mean of `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfoundedSpec {
    pub num_classes: usize,
    pub invariant_dim: usize,
    pub nuisance_dim: usize,
    pub train_correlation: f64,
    pub ood_correlation: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub noise_std: f64,
    pub render: Render,
    /// Radius of the class-mean layout of `Z_R`.
    pub separation: f64,
    /// Radius of the nuisance-mean layout of `Z_S`.
    pub nuisance_scale: f64,
    /// Translation level applied to the o.o.d splits of image bundles.
    pub ood_shift_level: f64,
}

impl Default for ConfoundedSpec {
    fn default() -> Self {
        ConfoundedSpec {
            num_classes: 4,
            invariant_dim: 4,
            nuisance_dim: 4,
            train_correlation: 0.9,
            ood_correlation: -0.9,
            train_size: 10_000,
            val_size: 1000,
            test_size: 1000,
            noise_std: 1.0,
            render: Render::Vector,
            separation: 3.0,
            nuisance_scale: 3.0,
            ood_shift_level: 0.0,
        }
    }
}

impl ConfoundedSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.num_classes < 2 || self.num_classes > u16::MAX as usize {
            return bad("num_classes", format!("must lie in [2, 65535], got {}", self.num_classes));
        }
        if self.invariant_dim < 1 {
            return bad("invariant_dim", "must be at least 1".into());
        }
        if self.nuisance_dim < 1 {
            return bad("nuisance_dim", "must be at least 1".into());
        }
        for (name, rho) in [("train_correlation", self.train_correlation), ("ood_correlation", self.ood_correlation)] {
            if !(rho.is_finite() && rho.abs() <= 1.0) {
                return bad(name, format!("must lie in [-1, 1], got {rho}"));
            }
        }
        for (name, n) in [("train_size", self.train_size), ("val_size", self.val_size), ("test_size", self.test_size)] {
            if n < self.num_classes {
                return bad(name, format!("needs at least one example per class, got {n}"));
            }
        }
        for (name, v) in
            [("noise_std", self.noise_std), ("separation", self.separation), ("nuisance_scale", self.nuisance_scale)]
        {
            if !(v.is_finite() && v >= 0.0) {
                return bad(name, format!("must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.ood_shift_level) {
            return bad("ood_shift_level", format!("must lie in [0, 1), got {}", self.ood_shift_level));
        }
        if let Render::Image { height, width } = self.render {
            if !(4..=64).contains(&height) || !(4..=64).contains(&width) {
                return bad("image_height", format!("image sides must lie in [4, 64], got {height}x{width}"));
            }
        } else if self.ood_shift_level != 0.0 {
            return bad("ood_shift_level", "translation needs image render".into());
        }
        Ok(())
    }

    pub fn input_shape(&self) -> InputShape {
        match self.render {
            Render::Vector => InputShape::Vector(self.invariant_dim + self.nuisance_dim),
            Render::Image { height, width } => InputShape::Image { channels: IMAGE_CHANNELS, height, width },
        }
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut spec = ConfoundedSpec::default();
        let (mut render, mut h, mut w) = ("vector".to_string(), 16usize, 16usize);
        for (k, v) in kvfile::parse(text)? {
            let key = k.as_str();
            match key {
                "num_classes" => spec.num_classes = parse_value(key, &v)?,
                "invariant_dim" => spec.invariant_dim = parse_value(key, &v)?,
                "nuisance_dim" => spec.nuisance_dim = parse_value(key, &v)?,
                "train_correlation" => spec.train_correlation = parse_value(key, &v)?,
                "ood_correlation" => spec.ood_correlation = parse_value(key, &v)?,
                "train_size" => spec.train_size = parse_value(key, &v)?,
                "val_size" => spec.val_size = parse_value(key, &v)?,
                "test_size" => spec.test_size = parse_value(key, &v)?,
                "noise_std" => spec.noise_std = parse_value(key, &v)?,
                "separation" => spec.separation = parse_value(key, &v)?,
                "nuisance_scale" => spec.nuisance_scale = parse_value(key, &v)?,
                "ood_shift_level" => spec.ood_shift_level = parse_value(key, &v)?,
                "render" => render = v,
                "image_height" => h = parse_value(key, &v)?,
                "image_width" => w = parse_value(key, &v)?,
                _ => return Err(KvError::UnknownKey(k).into()),
            }
        }
        spec.render = match render.as_str() {
            "vector" => Render::Vector,
            "image" => Render::Image { height: h, width: w },
            _ => {
                return Err(KvError::InvalidValue { key: "render".into(), msg: format!("{render:?}: expected vector or image") }
                    .into())
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "invariant_dim = {}", self.invariant_dim);
        let _ = writeln!(s, "nuisance_dim = {}", self.nuisance_dim);
        let _ = writeln!(s, "train_correlation = {}", self.train_correlation);
        let _ = writeln!(s, "ood_correlation = {}", self.ood_correlation);
        let _ = writeln!(s, "train_size = {}", self.train_size);
        let _ = writeln!(s, "val_size = {}", self.val_size);
        let _ = writeln!(s, "test_size = {}", self.test_size);
        let _ = writeln!(s, "noise_std = {}", self.noise_std);
        let _ = writeln!(s, "separation = {}", self.separation);
        let _ = writeln!(s, "nuisance_scale = {}", self.nuisance_scale);
        let _ = writeln!(s, "ood_shift_level = {}", self.ood_shift_level);
        match self.render {
            Render::Vector => {
                let _ = writeln!(s, "render = vector");
            }
            Render::Image { height, width } => {
                let _ = writeln!(s, "render = image\nimage_height = {height}\nimage_width = {width}");
            }
        }
        s
    }
}

/// Unit-radius layout of `k` class means in `dim` dimensions: a circle in
/// the first two coordinates, or evenly spaced points on a line when
/// `dim == 1`.
pub fn class_layout(k: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|c| {
            let mut v = vec![0.0; dim];
            if dim == 1 {
                v[0] = 2.0 * c as f64 / (k - 1) as f64 - 1.0;
            } else {
                let a = 2.0 * PI * c as f64 / k as f64;
                v[0] = a.cos();
                v[1] = a.sin();
            }
            v
        })
        .collect()
}

/// Latent variables of one split before rendering.
#[derive(Debug, Clone)]
pub struct Latents {
    pub labels: Vec<usize>,
    pub nuisance: Vec<usize>,
    pub z_r: Vec<Vec<f64>>,
    pub z_s: Vec<Vec<f64>>,
}

/// Nuisance code for label `y` at correlation `rho`: with probability `|ρ|`
/// it is `y` (ρ ≥ 0) or `(y + 1) mod K` (ρ < 0), otherwise uniform. For
/// `K = 2` the label-code correlation is exactly `ρ`.
fn nuisance_code(y: usize, k: usize, rho: f64, rng: &mut impl Rng) -> usize {
    if rng.random::<f64>() < rho.abs() {
        if rho >= 0.0 {
            y
        } else {
            (y + 1) % k
        }
    } else {
        rng.random_range(0..k)
    }
}

/// Balanced labels with their latent features.
pub fn sample_latents(spec: &ConfoundedSpec, rho: f64, n: usize, rng: &mut ChaCha8Rng) -> Latents {
    let k = spec.num_classes;
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(rng);
    let normal = Normal::new(0.0, spec.noise_std.max(0.0)).unwrap();
    let r_layout = class_layout(k, spec.invariant_dim);
    let s_layout = class_layout(k, spec.nuisance_dim);
    let mut lat = Latents { labels: labels.clone(), nuisance: Vec::with_capacity(n), z_r: Vec::new(), z_s: Vec::new() };
    for &y in &labels {
        let s = nuisance_code(y, k, rho, rng);
        lat.nuisance.push(s);
        lat.z_r.push(r_layout[y].iter().map(|m| spec.separation * m + normal.sample(rng)).collect());
        lat.z_s.push(s_layout[s].iter().map(|m| spec.nuisance_scale * m + normal.sample(rng)).collect());
    }
    lat
}

/// Renders latents into model inputs, rounded through `f32` so that the
/// bundle file stores them exactly.
pub fn render(spec: &ConfoundedSpec, lat: &Latents) -> Tensor {
    let n = lat.labels.len();
    let shape = spec.input_shape();
    let flat = shape.flat();
    let mut data = Vec::with_capacity(n * flat);
    for i in 0..n {
        match spec.render {
            Render::Vector => {
                data.extend_from_slice(&lat.z_r[i]);
                data.extend_from_slice(&lat.z_s[i]);
            }
            Render::Image { height, width } => data.extend(render_image(&lat.z_r[i], &lat.z_s[i], height, width)),
        }
    }
    for v in data.iter_mut() {
        *v = *v as f32 as f64;
    }
    Tensor::new(&shape.batch(n), data).expect("render shape")
}

/// Frequencies of the foreground basis patterns, in order of use.
fn basis_freq(j: usize) -> (f64, f64) {
    // (1,0), (0,1), (1,1), (2,0), (0,2), (2,1), (1,2), (2,2), ...
    const SMALL: [(f64, f64); 8] = [(1., 0.), (0., 1.), (1., 1.), (2., 0.), (0., 2.), (2., 1.), (1., 2.), (2., 2.)];
    SMALL.get(j).copied().unwrap_or(((j / 3) as f64, (j % 3) as f64 + 1.0))
}

/// The background carries `Z_S` as colour bands: band `b` of channel `c`
/// shows component `(c + 3b) mod nuisance_dim`. A centred patch of half the
/// image side carries `Z_R` as a sum of cosine patterns, equally in every
/// channel.
fn render_image(z_r: &[f64], z_s: &[f64], h: usize, w: usize) -> Vec<f64> {
    let bands = z_s.len().div_ceil(IMAGE_CHANNELS);
    let (ph, pw) = (h / 2, w / 2);
    let (y0, x0) = ((h - ph) / 2, (w - pw) / 2);
    let mut out = vec![0.0; IMAGE_CHANNELS * h * w];
    for c in 0..IMAGE_CHANNELS {
        for y in 0..h {
            let band = y * bands / h;
            let bg = z_s[(c + IMAGE_CHANNELS * band) % z_s.len()];
            for x in 0..w {
                let inside = (y0..y0 + ph).contains(&y) && (x0..x0 + pw).contains(&x);
                out[(c * h + y) * w + x] = if inside {
                    let (u, v) = ((y - y0) as f64 / ph as f64, (x - x0) as f64 / pw as f64);
                    z_r.iter()
                        .enumerate()
                        .map(|(j, z)| {
                            let (a, b) = basis_freq(j);
                            z * (PI * (a * u + b * v)).cos()
                        })
                        .sum()
                } else {
                    bg
                };
            }
        }
    }
    out
}

/// Generates the five splits. Deterministic in `seed`; each split draws from
/// its own substream.
pub fn gen_confounded(spec: &ConfoundedSpec, seed: u64) -> Result<DatasetBundle> {
    spec.validate()?;
    let split = |index: u64, rho: f64, n: usize, shift: bool| -> Result<Split> {
        let mut rng = substream_indexed(seed, Stream::Data, index);
        let lat = sample_latents(spec, rho, n, &mut rng);
        let mut inputs = render(spec, &lat);
        if shift && spec.ood_shift_level > 0.0 {
            inputs = translate_perturb(&inputs, spec.ood_shift_level, seed.wrapping_add(index))?;
        }
        Ok(Split { inputs, labels: lat.labels })
    };
    Ok(DatasetBundle {
        spec: spec.clone(),
        seed,
        train: split(0, spec.train_correlation, spec.train_size, false)?,
        val_iid: split(1, spec.train_correlation, spec.val_size, false)?,
        test_iid: split(2, spec.train_correlation, spec.test_size, false)?,
        val_ood: split(3, spec.ood_correlation, spec.val_size, true)?,
        test_ood: split(4, spec.ood_correlation, spec.test_size, true)?,
    })
}
