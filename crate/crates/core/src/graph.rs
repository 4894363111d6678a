//! Grid graphs over down-sampled pyramid maps.
//!
//! Every cell of a down-sampled map `P'` becomes a node; all pairs of nodes
//! are connected. Edge weights are a Gaussian affinity of the grid distance
//! (see [`gaussian_adjacency`]), and the propagation operator is the
//! symmetrically normalized adjacency with self-loops.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand_chacha::ChaCha8Rng;

use crate::backbone::NUM_LEVELS;
use crate::error::{Error, Result};
use crate::nn::{ConvBn, ParamStore, Session};
use crate::tensor::{Real, Tensor, Var};

/// Per-level down-sampling factors `s_i` applied before graph construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DownsampleConfig {
    factors: [usize; NUM_LEVELS],
}

impl DownsampleConfig {
    pub fn new(factors: [usize; NUM_LEVELS]) -> Result<Self> {
        for &s in &factors {
            if s == 0 || !s.is_power_of_two() {
                return Err(Error::Config(format!(
                    "down-sampling factor {s} is not a power of two"
                )));
            }
        }
        Ok(DownsampleConfig { factors })
    }

    pub fn factors(&self) -> [usize; NUM_LEVELS] {
        self.factors
    }

    pub fn factor(&self, level: usize) -> usize {
        self.factors[level]
    }

    /// Number of stride-2 stages needed for `level`.
    pub fn stages(&self, level: usize) -> usize {
        self.factors[level].trailing_zeros() as usize
    }
}

/// `log2(s)` repetitions of 3×3 stride-2 conv + batch norm + ReLU.
#[derive(Debug)]
pub struct Downsampler {
    factor: usize,
    stages: Vec<ConvBn>,
}

impl Downsampler {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width: usize, factor: usize) -> Result<Self> {
        let cfg = DownsampleConfig::new([factor; NUM_LEVELS])?;
        let stages = (0..cfg.stages(0))
            .map(|k| ConvBn::new(store, rng, &format!("{name}.down{k}"), width, width, 3, 2, true))
            .collect();
        Ok(Downsampler { factor, stages })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn forward<'t>(&self, s: &mut Session<'t, '_>, p: Var<'t>) -> Result<Var<'t>> {
        let shape = p.shape();
        let (h, w) = (shape[2], shape[3]);
        if h % self.factor != 0 || w % self.factor != 0 {
            return Err(Error::Config(format!(
                "map {h}x{w} is not divisible by down-sampling factor {}",
                self.factor
            )));
        }
        let mut x = p;
        for stage in &self.stages {
            x = stage.forward(s, x)?;
        }
        Ok(x)
    }
}

/// Row-major grid coordinates `(row, col)` of an `height × width` map.
pub fn grid_coords(height: usize, width: usize) -> Vec<(usize, usize)> {
    (0..height)
        .flat_map(|r| (0..width).map(move |c| (r, c)))
        .collect()
}

/// Fully connected adjacency with `A_jk = exp(−‖c_j − c_k‖² / 2σ²)` for
/// `j ≠ k` and a zero diagonal; coordinates are in grid units.
pub fn gaussian_adjacency(height: usize, width: usize, sigma: f64) -> Tensor {
    let coords = grid_coords(height, width);
    let n = coords.len();
    let denom = 2.0 * sigma * sigma;
    let mut a = Tensor::zeros(&[n, n]);
    let data = a.data_mut();
    for (j, &(rj, cj)) in coords.iter().enumerate() {
        for (k, &(rk, ck)) in coords.iter().enumerate() {
            if j != k {
                let dr = rj as f64 - rk as f64;
                let dc = cj as f64 - ck as f64;
                data[j * n + k] = (-(dr * dr + dc * dc) / denom).exp() as Real;
            }
        }
    }
    a
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃` the row sums of `A + I`.
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor> {
    let [n, m] = a.shape()[..] else {
        return Err(Error::dim("normalize_adjacency", format!("expected a matrix, got {:?}", a.shape())));
    };
    if n != m {
        return Err(Error::dim("normalize_adjacency", format!("matrix {n}x{m} is not square")));
    }
    let src = a.data();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|j| {
            let degree: f64 = 1.0 + src[j * n..(j + 1) * n].iter().map(|&v| v as f64).sum::<f64>();
            1.0 / degree.sqrt()
        })
        .collect();
    let mut out = Tensor::zeros(&[n, n]);
    let dst = out.data_mut();
    // fill the upper triangle from A's upper triangle and mirror it, so the
    // result is exactly symmetric whenever A is
    for j in 0..n {
        for k in j..n {
            let tilde = src[j * n + k] as f64 + if j == k { 1.0 } else { 0.0 };
            let v = (inv_sqrt[j] * tilde * inv_sqrt[k]) as Real;
            dst[j * n + k] = v;
            dst[k * n + j] = v;
        }
    }
    Ok(out)
}

#[derive(Debug)]
pub struct Adjacency {
    pub raw: Tensor,
    pub normalized: Tensor,
}

/// Memo of adjacency matrices keyed by `(height, width, σ)`.
#[derive(Debug, Default)]
pub struct AdjacencyCache {
    entries: Mutex<HashMap<(usize, usize, u64), Arc<Adjacency>>>,
}

impl AdjacencyCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, height: usize, width: usize, sigma: f64) -> Result<Arc<Adjacency>> {
        let key = (height, width, sigma.to_bits());
        let mut entries = self.entries.lock().expect("adjacency cache poisoned");
        if let Some(hit) = entries.get(&key) {
            return Ok(hit.clone());
        }
        let raw = gaussian_adjacency(height, width, sigma);
        let normalized = normalize_adjacency(&raw)?;
        let entry = Arc::new(Adjacency { raw, normalized });
        entries.insert(key, entry.clone());
        Ok(entry)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("adjacency cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Graph over one down-sampled map.
pub struct GridGraph<'t> {
    pub height: usize,
    pub width: usize,
    pub coords: Vec<(usize, usize)>,
    pub adjacency: Arc<Adjacency>,
    /// `[B, N, C]`, row `j` holds the channels of cell `coords[j]`.
    pub features: Var<'t>,
}

impl<'t> GridGraph<'t> {
    pub fn node_count(&self) -> usize {
        self.height * self.width
    }
}

/// `[B,C,H,W] -> [B,H·W,C]`, nodes in row-major cell order.
pub fn flatten_nodes<'t>(p: Var<'t>) -> Result<Var<'t>> {
    let shape = p.shape();
    let [b, c, h, w] = shape[..] else {
        return Err(Error::dim("flatten_nodes", format!("expected 4-D, got {shape:?}")));
    };
    p.reshape(&[b, c, h * w])?.transpose12()
}

/// Inverse of [`flatten_nodes`]: `[B,N,C] -> [B,C,H,W]`.
pub fn unflatten_nodes<'t>(f: Var<'t>, height: usize, width: usize) -> Result<Var<'t>> {
    let shape = f.shape();
    let [b, n, c] = shape[..] else {
        return Err(Error::dim("unflatten_nodes", format!("expected 3-D, got {shape:?}")));
    };
    if n != height * width {
        return Err(Error::dim(
            "unflatten_nodes",
            format!("{n} nodes cannot fill a {height}x{width} grid"),
        ));
    }
    f.transpose12()?.reshape(&[b, c, height, width])
}

pub fn build_graph<'t>(p: Var<'t>, sigma: f64, cache: &AdjacencyCache) -> Result<GridGraph<'t>> {
    let shape = p.shape();
    let [_, _, h, w] = shape[..] else {
        return Err(Error::dim("build_graph", format!("expected 4-D, got {shape:?}")));
    };
    Ok(GridGraph {
        height: h,
        width: w,
        coords: grid_coords(h, w),
        adjacency: cache.get(h, w, sigma)?,
        features: flatten_nodes(p)?,
    })
}
