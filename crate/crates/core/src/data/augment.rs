//! Training-time augmentation: flip, 90° rotation, padding, cropping and
//! additive Gaussian noise. Geometric transforms are nearest-neighbour index
//! maps shared by image and mask.
//!
//! Every geometric map keeps the parity of pixel coordinates, so the 2×2
//! colour-filter lattice of an authentic image stays where the generator put
//! it. Flips mirror about pixel 0 on the torus (`x -> -x mod w`), shifts and
//! crops move by even amounts, and the crop pads back to size instead of
//! resampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ManipSample;
use crate::tensor::{Real, Tensor};

/// Probability with which each transform is applied.
pub const APPLY_PROB: f64 = 0.5;
/// Largest shift in pixels; shifts are even.
pub const MAX_SHIFT: usize = 6;
/// Largest border cut per side in pixels; cuts are even.
pub const MAX_CROP: usize = 8;
pub const NOISE_SIGMA: f64 = 0.01;

/// Resamples every channel of `[C,H,W]` through `src(y, x)`, which returns
/// the source pixel or `None` for out-of-frame positions (filled with `fill`).
fn remap(t: &Tensor, fill: Real, src: impl Fn(usize, usize) -> Option<(usize, usize)>) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Tensor::full(s, fill);
    for y in 0..h {
        for x in 0..w {
            if let Some((sy, sx)) = src(y, x) {
                for ch in 0..c {
                    out.data_mut()[(ch * h + y) * w + x] = t.data()[(ch * h + sy) * w + sx];
                }
            }
        }
    }
    out
}

fn mirror(i: usize, n: usize) -> usize {
    (n - i) % n
}

pub fn hflip(t: &Tensor) -> Tensor {
    let w = t.shape()[2];
    remap(t, 0.0, |y, x| Some((y, mirror(x, w))))
}

pub fn vflip(t: &Tensor) -> Tensor {
    let h = t.shape()[1];
    remap(t, 0.0, |y, x| Some((mirror(y, h), x)))
}

/// Counter-clockwise rotation by `quarter_turns · 90°` about pixel (0, 0)
/// on the torus; square inputs only.
pub fn rot90(t: &Tensor, quarter_turns: usize) -> Tensor {
    let n = t.shape()[1];
    assert_eq!(n, t.shape()[2], "rot90 needs a square map");
    remap(t, 0.0, |y, x| {
        Some(match quarter_turns % 4 {
            0 => (y, x),
            1 => (x, mirror(y, n)),
            2 => (mirror(y, n), mirror(x, n)),
            _ => (mirror(x, n), y),
        })
    })
}

/// Pads by `(dy, dx)` on the top/left side and drops the same amount on
/// the opposite side, keeping the size.
pub fn pad_shift(t: &Tensor, dy: isize, dx: isize, fill: Real) -> Tensor {
    let (h, w) = (t.shape()[1] as isize, t.shape()[2] as isize);
    remap(t, fill, |y, x| {
        let (sy, sx) = (y as isize - dy, x as isize - dx);
        ((0..h).contains(&sy) && (0..w).contains(&sx)).then_some((sy as usize, sx as usize))
    })
}

/// Keeps the window starting at `(top, left)` with side lengths `(ch, cw)`
/// in place and zeroes everything outside it.
pub fn crop_pad(t: &Tensor, top: usize, left: usize, ch: usize, cw: usize) -> Tensor {
    remap(t, 0.0, |y, x| {
        ((top..top + ch).contains(&y) && (left..left + cw).contains(&x)).then_some((y, x))
    })
}

fn even_in(rng: &mut ChaCha8Rng, lo: i64, hi: i64) -> i64 {
    2 * rng.random_range(lo / 2..=hi / 2)
}

/// Applies a random subset of the five transforms, fully determined by `seed`.
pub fn augment(sample: &ManipSample, seed: u64) -> ManipSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();
    let (h, w) = sample.size();
    if rng.random_bool(APPLY_PROB) {
        if rng.random_bool(0.5) {
            image = hflip(&image);
            mask = hflip(&mask);
        } else {
            image = vflip(&image);
            mask = vflip(&mask);
        }
    }
    if rng.random_bool(APPLY_PROB) && h == w {
        let k = rng.random_range(1..4);
        image = rot90(&image, k);
        mask = rot90(&mask, k);
    }
    if rng.random_bool(APPLY_PROB) {
        let m = MAX_SHIFT as i64;
        let dy = even_in(&mut rng, -m, m) as isize;
        let dx = even_in(&mut rng, -m, m) as isize;
        image = pad_shift(&image, dy, dx, 0.0);
        mask = pad_shift(&mask, dy, dx, 0.0);
    }
    if rng.random_bool(APPLY_PROB) {
        let m = MAX_CROP.min(h / 4).min(w / 4) as i64;
        let [top, bottom, left, right] = [(); 4].map(|_| even_in(&mut rng, 0, m) as usize);
        image = crop_pad(&image, top, left, h - top - bottom, w - left - right);
        mask = crop_pad(&mask, top, left, h - top - bottom, w - left - right);
    }
    if rng.random_bool(APPLY_PROB) {
        let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
        for v in image.data_mut() {
            *v = (*v as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as Real;
        }
    }
    ManipSample {
        image,
        mask,
        kind: sample.kind.clone(),
        seed: sample.seed,
    }
}
