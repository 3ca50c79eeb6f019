use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::noise::{substream, Stream};

/// Largest offset along a side of `side` pixels at `level`.
pub fn max_offset(level: f64, side: usize) -> i64 {
    (level * side as f64).round() as i64
}

fn image_dims(images: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *images.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => Err(Error::Data(format!("translation needs [batch, channels, height, width] images, got {s:?}"))),
    }
}

/// One `(dy, dx)` per image, uniform over
/// `[−round(level·H), round(level·H)] × [−round(level·W), round(level·W)]`.
pub fn draw_offsets(n: usize, level: f64, height: usize, width: usize, rng: &mut impl Rng) -> Result<Vec<(i64, i64)>> {
    if !(0.0..1.0).contains(&level) {
        return Err(Error::Data(format!("translation level must lie in [0, 1), got {level}")));
    }
    let (my, mx) = (max_offset(level, height), max_offset(level, width));
    Ok((0..n).map(|_| (rng.random_range(-my..=my), rng.random_range(-mx..=mx))).collect())
}

/// Shifts image `i` down by `dy` and right by `dx`, filling with zeros.
pub fn translate_with_offsets(images: &Tensor, offsets: &[(i64, i64)]) -> Result<Tensor> {
    let (b, c, h, w) = image_dims(images)?;
    if offsets.len() != b {
        return Err(Error::Data(format!("{} offsets for {b} images", offsets.len())));
    }
    let src = images.data();
    let mut out = vec![0.0; src.len()];
    for (i, &(dy, dx)) in offsets.iter().enumerate() {
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for y in 0..h as i64 {
                let sy = y - dy;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                for x in 0..w as i64 {
                    let sx = x - dx;
                    if sx >= 0 && sx < w as i64 {
                        out[base + (y as usize) * w + x as usize] = src[base + (sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
    Ok(Tensor::new(images.shape(), out)?)
}

/// Random zero-filled translation of every image; level 0 is the identity.
pub fn translate_perturb(images: &Tensor, level: f64, seed: u64) -> Result<Tensor> {
    let (b, _, h, w) = image_dims(images)?;
    let offsets = draw_offsets(b, level, h, w, &mut substream(seed, Stream::Perturb))?;
    translate_with_offsets(images, &offsets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn blob(side: usize) -> Tensor {
        let c = side / 2 - 2;
        Tensor::from_fn(&[1, 1, side, side], |i| {
            let (y, x) = (i / side, i % side);
            if (c..c + 4).contains(&y) && (c..c + 4).contains(&x) {
                1.0 + (y * 4 + x) as f64
            } else {
                0.0
            }
        })
    }

    #[test]
    fn level_zero_is_identity() {
        let imgs = Tensor::from_fn(&[3, 2, 5, 7], |i| (i as f64).sin());
        assert_eq!(translate_perturb(&imgs, 0.0, 9).unwrap(), imgs);
    }

    #[test]
    fn offset_range_is_exact() {
        assert_eq!(max_offset(0.4, 32), 13);
        let offs = draw_offsets(10_000, 0.4, 32, 32, &mut substream(3, Stream::Perturb)).unwrap();
        let max = offs.iter().map(|(y, x)| y.abs().max(x.abs())).max().unwrap();
        assert_eq!(max, 13);
        assert!(offs.iter().any(|o| o.0 == -13) && offs.iter().any(|o| o.1 == 13));
    }

    #[test]
    fn rejects_vectors_and_bad_levels() {
        assert!(translate_perturb(&Tensor::zeros(&[2, 3]), 0.1, 0).is_err());
        assert!(translate_perturb(&Tensor::zeros(&[1, 1, 4, 4]), 1.0, 0).is_err());
    }

    #[test]
    fn mass_preserved_for_in_frame_shifts() {
        let img = blob(32);
        let total: f64 = img.data().iter().sum();
        for seed in 0..50 {
            let out = translate_perturb(&img, 0.3, seed).unwrap();
            assert_eq!(out.data().iter().sum::<f64>(), total);
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let img = Tensor::from_fn(&[4, 3, 8, 8], |i| i as f64);
        assert_eq!(translate_perturb(&img, 0.25, 1).unwrap(), translate_perturb(&img, 0.25, 1).unwrap());
    }

    proptest! {
        #[test]
        fn two_shifts_compose(a in (-5i64..=5, -5i64..=5), b in (-5i64..=5, -5i64..=5)) {
            let img = blob(32);
            let twice = translate_with_offsets(&translate_with_offsets(&img, &[a]).unwrap(), &[b]).unwrap();
            let once = translate_with_offsets(&img, &[(a.0 + b.0, a.1 + b.1)]).unwrap();
            prop_assert_eq!(twice, once);
        }
    }
}
