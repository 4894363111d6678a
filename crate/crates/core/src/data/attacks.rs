//! Image degradations for robustness sweeps. Each attack declares its
//! strength grid; the first grid entry is the null strength and returns the
//! input unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::{Named, Registry};
use crate::tensor::{Real, Tensor};

pub trait Attack: Named + Send + Sync {
    /// Allowed strengths, null strength first.
    fn grid(&self) -> &'static [f64];
    /// Degrades a `[3,H,W]` image at a non-null strength.
    fn degrade(&self, image: &Tensor, strength: f64, seed: u64) -> Tensor;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: String,
    pub strength: f64,
}

impl AttackSpec {
    /// Checks the kind against the registry and the strength against its grid.
    pub fn new(kind: &str, strength: f64) -> Result<Self> {
        let reg = registry();
        let attack = reg.get(kind)?;
        if !attack.grid().iter().any(|&g| (g - strength).abs() < 1e-9) {
            return Err(Error::Config(format!(
                "strength {strength} is not in the {kind} grid {:?}",
                attack.grid()
            )));
        }
        Ok(AttackSpec {
            kind: kind.to_string(),
            strength,
        })
    }

    pub fn is_null(&self) -> bool {
        registry()
            .get(&self.kind)
            .map(|a| (a.grid()[0] - self.strength).abs() < 1e-9)
            .unwrap_or(false)
    }
}

/// Applies `spec`; `seed` only matters for stochastic attacks.
pub fn apply_attack(image: &Tensor, spec: &AttackSpec, seed: u64) -> Result<Tensor> {
    let spec = AttackSpec::new(&spec.kind, spec.strength)?;
    if image.ndim() != 3 || image.shape()[0] != 3 {
        return Err(Error::dim("apply_attack", format!("expected [3,H,W], got {:?}", image.shape())));
    }
    if spec.is_null() {
        return Ok(image.clone());
    }
    let reg = registry();
    let out = reg.get(&spec.kind)?.degrade(image, spec.strength, seed);
    Ok(out.map(|v| v.clamp(0.0, 1.0)))
}

/// Every `(kind, strength)` grid point in registry order.
pub fn full_grid() -> Vec<AttackSpec> {
    let reg = registry();
    reg.iter()
        .flat_map(|a| {
            a.grid().iter().map(move |&s| AttackSpec {
                kind: a.name().to_string(),
                strength: s,
            })
        })
        .collect()
}

pub fn registry() -> Registry<dyn Attack> {
    let reg: Registry<dyn Attack> = Registry::new("attack kind");
    reg.with(Box::new(Jpeg))
        .with(Box::new(Resize))
        .with(Box::new(GaussianBlur))
        .with(Box::new(MeanBlur))
        .with(Box::new(Rotation))
        .with(Box::new(Noise))
}

fn channels(image: &Tensor) -> (usize, usize, usize) {
    let s = image.shape();
    (s[0], s[1], s[2])
}

/// Replicate-border pixel lookup.
fn clamped(plane: &[Real], h: usize, w: usize, y: isize, x: isize) -> Real {
    let y = y.clamp(0, h as isize - 1) as usize;
    let x = x.clamp(0, w as isize - 1) as usize;
    plane[y * w + x]
}

/// Bilinear sample at continuous `(y, x)` with replicate border.
fn bilinear(plane: &[Real], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let p = |dy, dx| clamped(plane, h, w, y0 + dy, x0 + dx) as f64;
    (1.0 - fy) * ((1.0 - fx) * p(0, 0) + fx * p(0, 1)) + fy * ((1.0 - fx) * p(1, 0) + fx * p(1, 1))
}

/// Separable convolution with replicate border.
fn separable(image: &Tensor, taps: &[f64]) -> Tensor {
    let (c, h, w) = channels(image);
    let r = (taps.len() / 2) as isize;
    let mut out = image.clone();
    for ch in 0..c {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        let mut tmp = vec![0.0 as Real; h * w];
        for y in 0..h {
            for x in 0..w {
                let acc: f64 = taps
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| t * clamped(plane, h, w, y as isize, x as isize + i as isize - r) as f64)
                    .sum();
                tmp[y * w + x] = acc as Real;
            }
        }
        let dst = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let acc: f64 = taps
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| t * clamped(&tmp, h, w, y as isize + i as isize - r, x as isize) as f64)
                    .sum();
                dst[y * w + x] = acc as Real;
            }
        }
    }
    out
}

pub struct GaussianBlur;

impl GaussianBlur {
    /// Normalized taps; sigma follows the usual kernel-size rule
    /// `0.3·((k−1)/2 − 1) + 0.8`.
    pub fn taps(k: usize) -> Vec<f64> {
        let sigma = 0.3 * ((k as f64 - 1.0) / 2.0 - 1.0) + 0.8;
        let r = (k / 2) as f64;
        let raw: Vec<f64> = (0..k)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

impl Named for GaussianBlur {
    fn name(&self) -> &'static str {
        "gaussian-blur"
    }
}

impl Attack for GaussianBlur {
    fn grid(&self) -> &'static [f64] {
        &[1.0, 3.0, 5.0, 7.0]
    }
    fn degrade(&self, image: &Tensor, strength: f64, _seed: u64) -> Tensor {
        separable(image, &Self::taps(strength as usize))
    }
}

pub struct MeanBlur;

impl Named for MeanBlur {
    fn name(&self) -> &'static str {
        "mean-blur"
    }
}

impl Attack for MeanBlur {
    fn grid(&self) -> &'static [f64] {
        &[1.0, 3.0, 5.0, 7.0]
    }
    fn degrade(&self, image: &Tensor, strength: f64, _seed: u64) -> Tensor {
        let k = strength as usize;
        separable(image, &vec![1.0 / k as f64; k])
    }
}

pub struct Resize;

/// Bilinear resize with pixel-centre alignment.
fn resize(image: &Tensor, nh: usize, nw: usize) -> Tensor {
    let (c, h, w) = channels(image);
    let (sy, sx) = (h as f64 / nh as f64, w as f64 / nw as f64);
    let mut out = Tensor::zeros(&[c, nh, nw]);
    for ch in 0..c {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..nh {
            for x in 0..nw {
                let v = bilinear(plane, h, w, (y as f64 + 0.5) * sy - 0.5, (x as f64 + 0.5) * sx - 0.5);
                out.data_mut()[(ch * nh + y) * nw + x] = v as Real;
            }
        }
    }
    out
}

impl Named for Resize {
    fn name(&self) -> &'static str {
        "resize"
    }
}

impl Attack for Resize {
    fn grid(&self) -> &'static [f64] {
        &[1.0, 0.9, 0.8, 0.7, 0.6, 0.5]
    }
    fn degrade(&self, image: &Tensor, strength: f64, _seed: u64) -> Tensor {
        let (_, h, w) = channels(image);
        let nh = ((h as f64 * strength).round() as usize).max(1);
        let nw = ((w as f64 * strength).round() as usize).max(1);
        resize(&resize(image, nh, nw), h, w)
    }
}

pub struct Rotation;

impl Named for Rotation {
    fn name(&self) -> &'static str {
        "rotation"
    }
}

impl Attack for Rotation {
    fn grid(&self) -> &'static [f64] {
        &[0.0, 5.0, 10.0, 15.0, 30.0]
    }
    fn degrade(&self, image: &Tensor, strength: f64, _seed: u64) -> Tensor {
        let (c, h, w) = channels(image);
        let (sin, cos) = strength.to_radians().sin_cos();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let mut out = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    let sy = cos * dy - sin * dx + cy;
                    let sx = sin * dy + cos * dx + cx;
                    out.data_mut()[(ch * h + y) * w + x] = bilinear(plane, h, w, sy, sx) as Real;
                }
            }
        }
        out
    }
}

pub struct Noise;

impl Named for Noise {
    fn name(&self) -> &'static str {
        "noise"
    }
}

impl Attack for Noise {
    fn grid(&self) -> &'static [f64] {
        &[0.0, 0.01, 0.02, 0.05]
    }
    fn degrade(&self, image: &Tensor, strength: f64, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, strength).expect("positive sigma");
        let mut out = image.clone();
        for v in out.data_mut() {
            *v = (*v as f64 + noise.sample(&mut rng)) as Real;
        }
        out
    }
}

/// Block-DCT quantization proxy for JPEG.
pub struct Jpeg;

const LUMA_TABLE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., //
    12., 12., 14., 19., 26., 58., 60., 55., //
    14., 13., 16., 24., 40., 57., 69., 56., //
    14., 17., 22., 29., 51., 87., 80., 62., //
    18., 22., 37., 56., 68., 109., 103., 77., //
    24., 35., 55., 64., 81., 104., 113., 92., //
    49., 64., 78., 87., 103., 121., 120., 101., //
    72., 92., 95., 98., 112., 100., 103., 99.,
];

impl Jpeg {
    /// Luminance table scaled by quality with the IJG rule.
    pub fn table(quality: f64) -> [f64; 64] {
        let q = quality.clamp(1.0, 100.0);
        let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
        LUMA_TABLE.map(|t| ((t * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0))
    }

    fn basis() -> [[f64; 8]; 8] {
        let mut b = [[0.0; 8]; 8];
        for (u, row) in b.iter_mut().enumerate() {
            let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            for (x, v) in row.iter_mut().enumerate() {
                *v = a * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos();
            }
        }
        b
    }

    /// Quantizes every 8×8 block of each channel; edge blocks use replicated pixels.
    pub fn compress(image: &Tensor, quality: f64) -> Tensor {
        let (c, h, w) = channels(image);
        let table = Self::table(quality);
        let b = Self::basis();
        let mut out = image.clone();
        for ch in 0..c {
            let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
            for by in (0..h).step_by(8) {
                for bx in (0..w).step_by(8) {
                    let mut block = [[0.0f64; 8]; 8];
                    for (y, row) in block.iter_mut().enumerate() {
                        for (x, v) in row.iter_mut().enumerate() {
                            let p = clamped(plane, h, w, (by + y) as isize, (bx + x) as isize) as f64;
                            *v = p * 255.0 - 128.0;
                        }
                    }
                    let mut coef = [[0.0f64; 8]; 8];
                    for u in 0..8 {
                        for v in 0..8 {
                            let mut s = 0.0;
                            for y in 0..8 {
                                for x in 0..8 {
                                    s += b[u][y] * b[v][x] * block[y][x];
                                }
                            }
                            let q = table[u * 8 + v];
                            coef[u][v] = (s / q).round() * q;
                        }
                    }
                    for y in 0..8 {
                        for x in 0..8 {
                            if by + y >= h || bx + x >= w {
                                continue;
                            }
                            let mut s = 0.0;
                            for u in 0..8 {
                                for v in 0..8 {
                                    s += b[u][y] * b[v][x] * coef[u][v];
                                }
                            }
                            let p = (s + 128.0).round().clamp(0.0, 255.0) / 255.0;
                            out.data_mut()[(ch * h + by + y) * w + bx + x] = p as Real;
                        }
                    }
                }
            }
        }
        out
    }
}

impl Named for Jpeg {
    fn name(&self) -> &'static str {
        "jpeg"
    }
}

impl Attack for Jpeg {
    fn grid(&self) -> &'static [f64] {
        &[100.0, 90.0, 80.0, 70.0, 60.0, 50.0]
    }
    fn degrade(&self, image: &Tensor, strength: f64, _seed: u64) -> Tensor {
        Self::compress(image, strength)
    }
}
