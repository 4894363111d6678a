//! Procedural base images and the three tampering operations.
//!
//! Base images carry two acquisition traces a detector can pick up: additive
//! sensor noise of a per-image strength, and a 2×2 colour-filter-like
//! modulation with a fixed phase. Pasting content from elsewhere breaks the
//! phase or the noise level; inpainting removes both.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ManipSample;
use crate::error::{Error, Result};
use crate::registry::{Named, Registry};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenParams {
    /// Square image side; must be a multiple of 32.
    pub size: usize,
    pub min_frac: f64,
    pub max_frac: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            size: 64,
            min_frac: 0.02,
            max_frac: 0.25,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 32 != 0 {
            return Err(Error::Config(format!("image size {} is not a multiple of 32", self.size)));
        }
        if !(0.0 < self.min_frac && self.min_frac <= self.max_frac && self.max_frac < 1.0) {
            return Err(Error::Config(format!(
                "mask fraction range [{}, {}] is invalid",
                self.min_frac, self.max_frac
            )));
        }
        Ok(())
    }
}

/// An untampered image and its acquisition traces.
#[derive(Clone, Debug)]
pub struct BaseImage {
    pub pixels: Tensor,
    pub noise_sigma: f64,
    pub phase: (usize, usize),
}

#[derive(Clone, Copy, Debug)]
struct Traces {
    noise_sigma: f64,
    cfa_amplitude: f64,
    phase: (usize, usize),
}

fn render(rng: &mut ChaCha8Rng, size: usize, traces: Traces) -> BaseImage {
    let n = size as f64;
    let mut img = vec![0.0f64; 3 * size * size];
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let grad: [(f64, f64); 3] = std::array::from_fn(|_| (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)));
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.06),
                rng.random_range(0.05..0.4),
                rng.random_range(0.05..0.4),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let (fy, fx) = (y as f64 / n, x as f64 / n);
                let mut v = base[c] + grad[c].0 * (fy - 0.5) + grad[c].1 * (fx - 0.5);
                for &(amp, wy, wx, ph) in &waves {
                    v += amp * (wy * y as f64 + wx * x as f64 + ph).sin();
                }
                img[(c * size + y) * size + x] = v;
            }
        }
    }
    let shapes = rng.random_range(1..4);
    for _ in 0..shapes {
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
        let cy = rng.random_range(0.0..n);
        let cx = rng.random_range(0.0..n);
        let ry = rng.random_range(n * 0.05..n * 0.3);
        let rx = rng.random_range(n * 0.05..n * 0.3);
        let ellipse = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                let inside = if ellipse { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                if inside {
                    for c in 0..3 {
                        img[(c * size + y) * size + x] = color[c];
                    }
                }
            }
        }
    }
    let noise = Normal::new(0.0, traces.noise_sigma).expect("positive sigma");
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let v = &mut img[(c * size + y) * size + x];
                *v += traces.cfa_amplitude * cfa_sign(c, y + traces.phase.0, x + traces.phase.1);
                *v += noise.sample(rng);
            }
        }
    }
    let pixels = Tensor::new(&[3, size, size], img.into_iter().map(|v| v.clamp(0.0, 1.0) as Real).collect())
        .expect("shape");
    BaseImage {
        pixels,
        noise_sigma: traces.noise_sigma,
        phase: traces.phase,
    }
}

/// Bayer-like layout: red on even/even, blue on odd/odd, green elsewhere.
fn cfa_sign(channel: usize, y: usize, x: usize) -> f64 {
    let site = match (y % 2, x % 2) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    };
    if site == channel {
        1.0
    } else {
        -0.5
    }
}

/// Authentic images share one colour-filter layout, as if taken with a
/// single camera model.
pub const AUTHENTIC_PHASE: (usize, usize) = (0, 0);

fn random_traces(rng: &mut ChaCha8Rng) -> Traces {
    Traces {
        noise_sigma: rng.random_range(0.01..0.02),
        cfa_amplitude: rng.random_range(0.08..0.12),
        phase: AUTHENTIC_PHASE,
    }
}

pub fn render_base(rng: &mut ChaCha8Rng, size: usize) -> BaseImage {
    let traces = random_traces(rng);
    render(rng, size, traces)
}

/// A set of pixels, row-major `(row, col)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub pixels: Vec<(usize, usize)>,
    pub size: usize,
}

impl Region {
    pub fn mask(&self) -> Tensor {
        let mut m = Tensor::zeros(&[1, self.size, self.size]);
        for &(y, x) in &self.pixels {
            m.data_mut()[y * self.size + x] = 1.0;
        }
        m
    }

    /// Inclusive `(top, bottom, left, right)`.
    fn bbox(&self) -> (isize, isize, isize, isize) {
        let ys = self.pixels.iter().map(|p| p.0 as isize);
        let xs = self.pixels.iter().map(|p| p.1 as isize);
        (
            ys.clone().min().unwrap_or(0),
            ys.max().unwrap_or(0),
            xs.clone().min().unwrap_or(0),
            xs.max().unwrap_or(0),
        )
    }
}

const MAX_ATTEMPTS: usize = 200;

/// Rectangle or ellipse whose area fraction lies in the configured range.
pub fn sample_region(rng: &mut ChaCha8Rng, params: &GenParams) -> Result<Region> {
    let size = params.size;
    let n = size as f64;
    for _ in 0..MAX_ATTEMPTS {
        let frac = rng.random_range(params.min_frac..=params.max_frac);
        let aspect = rng.random_range(0.6..1.6f64);
        let ellipse = rng.random_bool(0.5);
        let fill = if ellipse { std::f64::consts::FRAC_PI_4 } else { 1.0 };
        let area = frac * n * n / fill;
        let h = (area * aspect).sqrt();
        let w = area / h;
        if h + 2.0 > n || w + 2.0 > n || h < 2.0 || w < 2.0 {
            continue;
        }
        let top = rng.random_range(0.0..n - h);
        let left = rng.random_range(0.0..n - w);
        let (cy, cx) = (top + h / 2.0, left + w / 2.0);
        let mut pixels = Vec::new();
        for y in 0..size {
            for x in 0..size {
                let dy = (y as f64 + 0.5 - cy) / (h / 2.0);
                let dx = (x as f64 + 0.5 - cx) / (w / 2.0);
                let inside = if ellipse { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                if inside {
                    pixels.push((y, x));
                }
            }
        }
        let got = pixels.len() as f64 / (n * n);
        if got >= params.min_frac && got <= params.max_frac {
            return Ok(Region { pixels, size });
        }
    }
    Err(Error::Generation(format!(
        "no region with area fraction in [{}, {}] after {MAX_ATTEMPTS} attempts",
        params.min_frac, params.max_frac
    )))
}

/// A tampering operation: rewrites `region` of the base image.
pub trait Tamper: Named + Send + Sync {
    fn apply(&self, base: &BaseImage, region: &Region, rng: &mut ChaCha8Rng) -> Result<Tensor>;
}

/// Pastes a patch of the same image at an odd offset in both axes.
pub struct CopyMove;

impl Named for CopyMove {
    fn name(&self) -> &'static str {
        "copy-move"
    }
}

impl CopyMove {
    /// Offset `(dy, dx)`, odd in both axes, such that `region − offset`
    /// lies inside the image and its bounding box is disjoint from the
    /// region's. Drawn uniformly from all valid offsets.
    pub fn pick_offset(region: &Region, rng: &mut ChaCha8Rng) -> Result<(isize, isize)> {
        let n = region.size as isize;
        let (y0, y1, x0, x1) = region.bbox();
        let (h, w) = (y1 - y0 + 1, x1 - x0 + 1);
        let mut valid = Vec::new();
        for dy in (-(n - 1)..n).filter(|d| d % 2 != 0) {
            for dx in (-(n - 1)..n).filter(|d| d % 2 != 0) {
                let inside = y0 - dy >= 0 && y1 - dy < n && x0 - dx >= 0 && x1 - dx < n;
                if inside && (dy.abs() >= h || dx.abs() >= w) {
                    valid.push((dy, dx));
                }
            }
        }
        if valid.is_empty() {
            return Err(Error::Generation("no room for a copy-move source patch".into()));
        }
        Ok(valid[rng.random_range(0..valid.len())])
    }
}

impl Tamper for CopyMove {
    fn apply(&self, base: &BaseImage, region: &Region, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let (dy, dx) = Self::pick_offset(region, rng)?;
        let n = region.size;
        let src = base.pixels.data();
        let mut out = base.pixels.clone();
        let dst = out.data_mut();
        for &(y, x) in &region.pixels {
            let (sy, sx) = ((y as isize - dy) as usize, (x as isize - dx) as usize);
            for c in 0..3 {
                dst[(c * n + y) * n + x] = src[(c * n + sy) * n + sx];
            }
        }
        Ok(out)
    }
}

/// Pastes content from an independently generated donor image whose
/// noise level and colour-filter phase differ from the base.
pub struct Splice;

impl Named for Splice {
    fn name(&self) -> &'static str {
        "splice"
    }
}

impl Tamper for Splice {
    fn apply(&self, base: &BaseImage, region: &Region, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let n = region.size;
        let mut traces = random_traces(rng);
        let shift = [(1, 0), (0, 1), (1, 1)][rng.random_range(0..3)];
        traces.phase = ((base.phase.0 + shift.0) % 2, (base.phase.1 + shift.1) % 2);
        traces.noise_sigma = if rng.random_bool(0.5) {
            base.noise_sigma * rng.random_range(2.5..4.0)
        } else {
            base.noise_sigma * rng.random_range(0.15..0.35)
        };
        let donor = render(rng, n, traces);
        let mut out = base.pixels.clone();
        let dst = out.data_mut();
        for &(y, x) in &region.pixels {
            for c in 0..3 {
                let j = (c * n + y) * n + x;
                dst[j] = donor.pixels.data()[j];
            }
        }
        Ok(out)
    }
}

/// Fills the region by repeatedly averaging already-known 8-neighbours,
/// peeling inwards from the boundary.
pub struct Removal;

impl Named for Removal {
    fn name(&self) -> &'static str {
        "removal"
    }
}

impl Tamper for Removal {
    fn apply(&self, base: &BaseImage, region: &Region, _rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let n = region.size;
        let mut known = vec![true; n * n];
        for &(y, x) in &region.pixels {
            known[y * n + x] = false;
        }
        let mut out = base.pixels.clone();
        let mut pending: Vec<(usize, usize)> = region.pixels.clone();
        while !pending.is_empty() {
            let mut filled = Vec::new();
            let mut rest = Vec::new();
            for &(y, x) in &pending {
                let mut acc = [0.0f64; 3];
                let mut count = 0;
                for ny in y.saturating_sub(1)..=(y + 1).min(n - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(n - 1) {
                        if known[ny * n + nx] {
                            for (c, a) in acc.iter_mut().enumerate() {
                                *a += out.data()[(c * n + ny) * n + nx] as f64;
                            }
                            count += 1;
                        }
                    }
                }
                if count > 0 {
                    filled.push(((y, x), acc.map(|a| a / count as f64)));
                } else {
                    rest.push((y, x));
                }
            }
            if filled.is_empty() {
                return Err(Error::Generation("removal region has no known border".into()));
            }
            for ((y, x), v) in filled {
                for (c, &val) in v.iter().enumerate() {
                    out.data_mut()[(c * n + y) * n + x] = val as Real;
                }
                known[y * n + x] = true;
            }
            pending = rest;
        }
        Ok(out)
    }
}

pub fn tamper_registry() -> Registry<dyn Tamper> {
    let reg: Registry<dyn Tamper> = Registry::new("manipulation kind");
    reg.with(Box::new(CopyMove))
        .with(Box::new(Splice))
        .with(Box::new(Removal))
}

/// Generates a sample together with its untampered base.
pub fn generate_with_base(kind: &str, seed: u64, params: &GenParams) -> Result<(ManipSample, BaseImage)> {
    params.validate()?;
    let registry = tamper_registry();
    let tamper = registry.get(kind)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = render_base(&mut rng, params.size);
    let mut attempts = 0;
    let (region, image) = loop {
        let region = sample_region(&mut rng, params)?;
        match tamper.apply(&base, &region, &mut rng) {
            Ok(image) => break (region, image),
            Err(Error::Generation(msg)) => {
                attempts += 1;
                if attempts == MAX_ATTEMPTS {
                    return Err(Error::Generation(msg));
                }
            }
            Err(e) => return Err(e),
        }
    };
    Ok((
        ManipSample {
            image,
            mask: region.mask(),
            kind: kind.to_string(),
            seed,
        },
        base,
    ))
}

pub fn generate(kind: &str, seed: u64, params: &GenParams) -> Result<ManipSample> {
    generate_with_base(kind, seed, params).map(|(s, _)| s)
}

/// `count` samples with seeds `first_seed..`, cycling through the kinds.
pub fn generate_set(first_seed: u64, count: usize, params: &GenParams) -> Result<Vec<ManipSample>> {
    let kinds = tamper_registry().names();
    (0..count)
        .map(|i| generate(kinds[i % kinds.len()], first_seed + i as u64, params))
        .collect()
}
