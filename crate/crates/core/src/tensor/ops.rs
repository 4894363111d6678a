use std::rc::Rc;

use super::{Real, Tensor, Var};
use crate::error::{Error, Result};

/// Batch-norm numerical guard.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running ones.
    Train,
    /// Normalize with the running statistics.
    Eval,
}

/// Running per-channel statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub mean: Vec<Real>,
    pub var: Vec<Real>,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// `(outer, extent, inner)` decomposition around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(Real, Real) -> Real) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

/// Per-axis source indices and weights for align-corners bilinear sampling.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, Real)> {
    (0..dst)
        .map(|o| {
            if dst == 1 || src == 1 {
                return (0, 0, 0.0);
            }
            let pos = o as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (pos - i0 as f64) as Real)
        })
        .collect()
}

impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let out = zip_map(&a, &b, |x, y| x + y);
        let need = [self.requires_grad(), other.requires_grad()];
        Ok(self.tape().push(out, &[self, other], move |g| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())]
        }))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let out = zip_map(&a, &b, |x, y| x - y);
        let need = [self.requires_grad(), other.requires_grad()];
        Ok(self.tape().push(out, &[self, other], move |g| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.map(|v| -v))]
        }))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let out = zip_map(&a, &b, |x, y| x * y);
        let need = [self.requires_grad(), other.requires_grad()];
        Ok(self.tape().push(out, &[self, other], move |g| {
            vec![
                need[0].then(|| zip_map(g, &b, |d, y| d * y)),
                need[1].then(|| zip_map(g, &a, |d, x| d * x)),
            ]
        }))
    }

    pub fn scale(self, factor: Real) -> Var<'t> {
        let out = self.value().map(|v| v * factor);
        self.tape()
            .push(out, &[self], move |g| vec![Some(g.map(|d| d * factor))])
    }

    pub fn add_scalar(self, offset: Real) -> Var<'t> {
        let out = self.value().map(|v| v + offset);
        self.tape().push(out, &[self], move |g| vec![Some(g.clone())])
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let total: f64 = x.sum();
        let shape = x.shape().to_vec();
        self.tape()
            .push(Tensor::scalar(total as Real), &[self], move |g| {
                vec![Some(Tensor::full(&shape, g.item()))]
            })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel().max(1);
        self.sum().scale(1.0 / n as Real)
    }

    pub fn relu(self) -> Var<'t> {
        let x = self.value();
        if let Some(gate) = self.tape().relu_gate(&x) {
            let out = Tensor::from_fn(x.shape(), |i| if gate[i] { x.data()[i] } else { 0.0 });
            return self.tape().push(out, &[self], move |g| {
                vec![Some(Tensor::from_fn(g.shape(), |i| if gate[i] { g.data()[i] } else { 0.0 }))]
            });
        }
        let out = x.map(|v| v.max(0.0));
        self.tape().push(out, &[self], move |g| {
            vec![Some(zip_map(g, &x, |d, v| if v > 0.0 { d } else { 0.0 }))]
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = self.value().map(sigmoid);
        let y = Rc::new(out.clone());
        self.tape().push(out, &[self], move |g| {
            vec![Some(zip_map(g, &y, |d, s| d * s * (1.0 - s)))]
        })
    }

    /// Softmax along `axis`; every slice along it sums to one.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.ndim() {
            return Err(Error::dim(
                "softmax",
                format!("axis {axis} out of range for {:?}", x.shape()),
            ));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut out = Tensor::zeros(x.shape());
        {
            let src = x.data();
            let dst = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let max = (0..len)
                        .map(|k| src[base + k * inner])
                        .fold(Real::NEG_INFINITY, Real::max);
                    let mut total = 0.0;
                    for k in 0..len {
                        let e = (src[base + k * inner] - max).exp();
                        dst[base + k * inner] = e;
                        total += e;
                    }
                    for k in 0..len {
                        dst[base + k * inner] /= total;
                    }
                }
            }
        }
        let y = Rc::new(out.clone());
        Ok(self.tape().push(out, &[self], move |g| {
            let mut dx = Tensor::zeros(y.shape());
            let (ys, gs) = (y.data(), g.data());
            let d = dx.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: Real = (0..len)
                        .map(|k| gs[base + k * inner] * ys[base + k * inner])
                        .sum();
                    for k in 0..len {
                        let j = base + k * inner;
                        d[j] = ys[j] * (gs[j] - dot);
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let out = (*x).clone().reshape(shape)?;
        let original = x.shape().to_vec();
        Ok(self.tape().push(out, &[self], move |g| {
            vec![Some(g.clone().reshape(&original).expect("same numel"))]
        }))
    }

    /// Swaps the last two axes of a 3-D tensor: `[b, m, n] -> [b, n, m]`.
    pub fn transpose12(self) -> Result<Var<'t>> {
        let x = self.value();
        let [b, m, n] = x.shape()[..] else {
            return Err(Error::dim(
                "transpose12",
                format!("expected 3-D, got {:?}", x.shape()),
            ));
        };
        let out = transpose_last(&x, b, m, n);
        Ok(self.tape().push(out, &[self], move |g| {
            vec![Some(transpose_last(g, b, n, m))]
        }))
    }

    /// Matrix product.
    ///
    /// Supports `[m,k]·[k,n]`, batched left `[b,m,k]·[k,n]`, and batched
    /// right `[m,k]·[b,k,n]` (the graph propagation `Â·X` case).
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let layout = MatmulLayout::infer(a.shape(), b.shape())?;
        let out = layout.forward(&a, &b);
        let need = [self.requires_grad(), other.requires_grad()];
        Ok(self.tape().push(out, &[self, other], move |g| {
            let (da, db) = layout.backward(&a, &b, g, need);
            vec![da, db]
        }))
    }

    /// Bilinear resize of a `[B,C,H,W]` map with aligned corners.
    pub fn upsample_bilinear(self, height: usize, width: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4()?;
        if height < h || width < w {
            return Err(Error::dim(
                "upsample_bilinear",
                format!("target {height}x{width} smaller than source {h}x{w}"),
            ));
        }
        if (height, width) == (h, w) {
            return Ok(self);
        }
        let ty = bilinear_taps(h, height);
        let tx = bilinear_taps(w, width);
        let mut out = Tensor::zeros(&[b, c, height, width]);
        {
            let src = x.data();
            let dst = out.data_mut();
            for plane in 0..b * c {
                let s = &src[plane * h * w..(plane + 1) * h * w];
                let d = &mut dst[plane * height * width..(plane + 1) * height * width];
                for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                        let top = s[y0 * w + x0] * (1.0 - wx) + s[y0 * w + x1] * wx;
                        let bot = s[y1 * w + x0] * (1.0 - wx) + s[y1 * w + x1] * wx;
                        d[oy * width + ox] = top * (1.0 - wy) + bot * wy;
                    }
                }
            }
        }
        Ok(self.tape().push(out, &[self], move |g| {
            let mut dx = Tensor::zeros(&[b, c, h, w]);
            let gs = g.data();
            let d = dx.data_mut();
            for plane in 0..b * c {
                let gp = &gs[plane * height * width..(plane + 1) * height * width];
                let dp = &mut d[plane * h * w..(plane + 1) * h * w];
                for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                        let v = gp[oy * width + ox];
                        dp[y0 * w + x0] += v * (1.0 - wy) * (1.0 - wx);
                        dp[y0 * w + x1] += v * (1.0 - wy) * wx;
                        dp[y1 * w + x0] += v * wy * (1.0 - wx);
                        dp[y1 * w + x1] += v * wy * wx;
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Batch normalization over `(B, H, W)` of a `[B,C,H,W]` map with a
    /// learnable per-channel scale and shift.
    pub fn batch_norm(
        self,
        scale: Var<'t>,
        shift: Var<'t>,
        state: &mut BnState,
        mode: BnMode,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4()?;
        let (gamma, beta) = (scale.value(), shift.value());
        if state.channels() != c || gamma.numel() != c || beta.numel() != c {
            return Err(Error::dim(
                "batch_norm",
                format!(
                    "input has {c} channels, state {} / scale {} / shift {}",
                    state.channels(),
                    gamma.numel(),
                    beta.numel()
                ),
            ));
        }
        let hw = h * w;
        let count = b * hw;
        let src = x.data();
        let mut inv_std = vec![0.0 as Real; c];
        let mut means = vec![0.0 as Real; c];
        for ch in 0..c {
            let (mean, var) = match mode {
                BnMode::Train => {
                    let mut s = 0.0f64;
                    for n in 0..b {
                        let off = (n * c + ch) * hw;
                        s += src[off..off + hw].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let mean = s / count as f64;
                    let mut sq = 0.0f64;
                    for n in 0..b {
                        let off = (n * c + ch) * hw;
                        sq += src[off..off + hw]
                            .iter()
                            .map(|&v| (v as f64 - mean).powi(2))
                            .sum::<f64>();
                    }
                    let var = sq / count as f64;
                    let unbiased = if count > 1 {
                        sq / (count - 1) as f64
                    } else {
                        0.0
                    };
                    let m = BN_MOMENTUM;
                    state.mean[ch] = ((1.0 - m) * state.mean[ch] as f64 + m * mean) as Real;
                    state.var[ch] = ((1.0 - m) * state.var[ch] as f64 + m * unbiased) as Real;
                    (mean, var)
                }
                BnMode::Eval => (state.mean[ch] as f64, state.var[ch] as f64),
            };
            means[ch] = mean as Real;
            inv_std[ch] = (1.0 / (var + BN_EPS).sqrt()) as Real;
        }
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        {
            let (xh, o) = (xhat.data_mut(), out.data_mut());
            for n in 0..b {
                for ch in 0..c {
                    let off = (n * c + ch) * hw;
                    let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
                    for j in off..off + hw {
                        let v = (src[j] - means[ch]) * inv_std[ch];
                        xh[j] = v;
                        o[j] = g * v + bt;
                    }
                }
            }
        }
        let need = [
            self.requires_grad(),
            scale.requires_grad(),
            shift.requires_grad(),
        ];
        Ok(self.tape().push(out, &[self, scale, shift], move |g| {
            let gs = g.data();
            let xh = xhat.data();
            let mut dgamma = vec![0.0 as Real; c];
            let mut dbeta = vec![0.0 as Real; c];
            let mut sum_dy = vec![0.0f64; c];
            let mut sum_dy_xhat = vec![0.0f64; c];
            for n in 0..b {
                for ch in 0..c {
                    let off = (n * c + ch) * hw;
                    for j in off..off + hw {
                        sum_dy[ch] += gs[j] as f64;
                        sum_dy_xhat[ch] += (gs[j] * xh[j]) as f64;
                    }
                }
            }
            for ch in 0..c {
                dgamma[ch] = sum_dy_xhat[ch] as Real;
                dbeta[ch] = sum_dy[ch] as Real;
            }
            let dx = need[0].then(|| {
                let mut dx = Tensor::zeros(&[b, c, h, w]);
                let d = dx.data_mut();
                for n in 0..b {
                    for ch in 0..c {
                        let off = (n * c + ch) * hw;
                        let k = gamma.data()[ch] * inv_std[ch];
                        match mode {
                            BnMode::Train => {
                                let mdy = (sum_dy[ch] / count as f64) as Real;
                                let mdyx = (sum_dy_xhat[ch] / count as f64) as Real;
                                for j in off..off + hw {
                                    d[j] = k * (gs[j] - mdy - xh[j] * mdyx);
                                }
                            }
                            BnMode::Eval => {
                                for j in off..off + hw {
                                    d[j] = k * gs[j];
                                }
                            }
                        }
                    }
                }
                dx
            });
            vec![
                dx,
                need[1].then(|| Tensor::new(&[c], dgamma).expect("c")),
                need[2].then(|| Tensor::new(&[c], dbeta).expect("c")),
            ]
        }))
    }
}

/// Concatenation along `axis`; all other extents must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let Some(first) = parts.first() else {
        return Err(Error::dim("concat", "no inputs"));
    };
    let values: Vec<Rc<Tensor>> = parts.iter().map(|v| v.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(Error::dim("concat", format!("axis {axis} out of range")));
    }
    for v in &values[1..] {
        let s = v.shape();
        let ok = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::dim(
                "concat",
                format!("{:?} incompatible with {:?} on axis {axis}", s, base),
            ));
        }
    }
    let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = extents.iter().sum();
    let mut shape = base.clone();
    shape[axis] = total;
    let (outer, _, inner) = split_axis(&shape, axis);
    let mut out = Tensor::zeros(&shape);
    {
        let dst = out.data_mut();
        let mut offset = 0;
        for (v, &len) in values.iter().zip(&extents) {
            let src = v.data();
            for o in 0..outer {
                let from = &src[o * len * inner..(o + 1) * len * inner];
                let at = (o * total + offset) * inner;
                dst[at..at + len * inner].copy_from_slice(from);
            }
            offset += len;
        }
    }
    let need: Vec<bool> = parts.iter().map(|v| v.requires_grad()).collect();
    Ok(first.tape().push(out, parts, move |g| {
        let gs = g.data();
        let mut offset = 0;
        let mut grads = Vec::with_capacity(extents.len());
        for (k, &len) in extents.iter().enumerate() {
            if need[k] {
                let mut s = shape.clone();
                s[axis] = len;
                let mut d = Tensor::zeros(&s);
                let dd = d.data_mut();
                for o in 0..outer {
                    let at = (o * total + offset) * inner;
                    dd[o * len * inner..(o + 1) * len * inner]
                        .copy_from_slice(&gs[at..at + len * inner]);
                }
                grads.push(Some(d));
            } else {
                grads.push(None);
            }
            offset += len;
        }
        grads
    }))
}

pub(crate) fn sigmoid(v: Real) -> Real {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn transpose_last(x: &Tensor, b: usize, m: usize, n: usize) -> Tensor {
    let src = x.data();
    let mut out = vec![0.0; b * m * n];
    for k in 0..b {
        for i in 0..m {
            for j in 0..n {
                out[k * m * n + j * m + i] = src[k * m * n + i * n + j];
            }
        }
    }
    Tensor::new(&[b, n, m], out).expect("transpose")
}

#[derive(Clone, Copy, Debug)]
enum MatmulLayout {
    Plain { m: usize, k: usize, n: usize },
    BatchedLeft { b: usize, m: usize, k: usize, n: usize },
    BatchedRight { b: usize, m: usize, k: usize, n: usize },
}

impl MatmulLayout {
    fn infer(a: &[usize], b: &[usize]) -> Result<Self> {
        let mismatch = || {
            Error::dim(
                "matmul",
                format!("cannot multiply {a:?} by {b:?}"),
            )
        };
        match (a, b) {
            ([m, k], [k2, n]) if k == k2 => Ok(Self::Plain { m: *m, k: *k, n: *n }),
            ([bt, m, k], [k2, n]) if k == k2 => Ok(Self::BatchedLeft {
                b: *bt,
                m: *m,
                k: *k,
                n: *n,
            }),
            ([m, k], [bt, k2, n]) if k == k2 => Ok(Self::BatchedRight {
                b: *bt,
                m: *m,
                k: *k,
                n: *n,
            }),
            _ => Err(mismatch()),
        }
    }

    fn forward(&self, a: &Tensor, b: &Tensor) -> Tensor {
        use super::gemm;
        match *self {
            Self::Plain { m, k, n } => {
                let mut out = Tensor::zeros(&[m, n]);
                gemm(m, k, n, 1.0, a.data(), (k, 1), b.data(), (n, 1), 0.0, out.data_mut(), (n, 1));
                out
            }
            Self::BatchedLeft { b: bt, m, k, n } => {
                let mut out = Tensor::zeros(&[bt, m, n]);
                let rows = bt * m;
                gemm(rows, k, n, 1.0, a.data(), (k, 1), b.data(), (n, 1), 0.0, out.data_mut(), (n, 1));
                out
            }
            Self::BatchedRight { b: bt, m, k, n } => {
                let mut out = Tensor::zeros(&[bt, m, n]);
                for i in 0..bt {
                    gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.data(),
                        (k, 1),
                        &b.data()[i * k * n..],
                        (n, 1),
                        0.0,
                        &mut out.data_mut()[i * m * n..],
                        (n, 1),
                    );
                }
                out
            }
        }
    }

    fn backward(
        &self,
        a: &Tensor,
        b: &Tensor,
        g: &Tensor,
        need: [bool; 2],
    ) -> (Option<Tensor>, Option<Tensor>) {
        use super::gemm;
        match *self {
            Self::Plain { m, k, n } | Self::BatchedLeft { m, k, n, .. } => {
                let rows = match *self {
                    Self::BatchedLeft { b: bt, .. } => bt * m,
                    _ => m,
                };
                // dA = G·Bᵀ, dB = Aᵀ·G over the flattened rows.
                let da = need[0].then(|| {
                    let mut d = Tensor::zeros(a.shape());
                    gemm(rows, n, k, 1.0, g.data(), (n, 1), b.data(), (1, n), 0.0, d.data_mut(), (k, 1));
                    d
                });
                let db = need[1].then(|| {
                    let mut d = Tensor::zeros(b.shape());
                    gemm(k, rows, n, 1.0, a.data(), (1, k), g.data(), (n, 1), 0.0, d.data_mut(), (n, 1));
                    d
                });
                (da, db)
            }
            Self::BatchedRight { b: bt, m, k, n } => {
                let da = need[0].then(|| {
                    let mut d = Tensor::zeros(a.shape());
                    for i in 0..bt {
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            &g.data()[i * m * n..],
                            (n, 1),
                            &b.data()[i * k * n..],
                            (1, n),
                            1.0,
                            d.data_mut(),
                            (k, 1),
                        );
                    }
                    d
                });
                let db = need[1].then(|| {
                    let mut d = Tensor::zeros(b.shape());
                    for i in 0..bt {
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            a.data(),
                            (1, k),
                            &g.data()[i * m * n..],
                            (n, 1),
                            0.0,
                            &mut d.data_mut()[i * k * n..],
                            (n, 1),
                        );
                    }
                    d
                });
                (da, db)
            }
        }
    }
}
