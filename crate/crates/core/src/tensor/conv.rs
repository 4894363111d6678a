use super::{gemm, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Output extent of a convolution along one axis.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one image `[C,H,W]` into `[C·k·k, Ho·Wo]`.
    fn im2col(&self, img: &[Real], cols: &mut [Real]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let n = self.out_len();
        for ch in 0..self.c {
            let plane = &img[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ch * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..self.ho {
                        let iy = (oy * s + ky) as isize - p;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters columns back into an image.
    fn col2im(&self, cols: &[Real], img: &mut [Real]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let n = self.out_len();
        for ch in 0..self.c {
            let plane = &mut img[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ch * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..self.ho {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &src[oy * self.wo..(oy + 1) * self.wo];
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, &v) in line.iter().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    /// 2-D cross-correlation of `[B,C,H,W]` with `[C',C,k,k]` weights and an
    /// optional `[C']` bias.
    pub fn conv2d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let wt = weight.value();
        let (b, c, h, w) = x.dims4()?;
        let (co, ci, kh, kw) = wt.dims4()?;
        if ci != c {
            return Err(Error::dim(
                "conv2d",
                format!("input has {c} channels, kernel expects {ci}"),
            ));
        }
        if kh != kw {
            return Err(Error::dim("conv2d", format!("non-square kernel {kh}x{kw}")));
        }
        let bias_val = bias.map(|v| v.value());
        if let Some(bv) = &bias_val {
            if bv.numel() != co {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias has {} entries for {co} output channels", bv.numel()),
                ));
            }
        }
        let (Some(ho), Some(wo)) = (
            conv_output_size(h, kh, stride, padding),
            conv_output_size(w, kw, stride, padding),
        ) else {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh} stride {stride} pad {padding} does not fit {h}x{w}"),
            ));
        };
        let geo = Geometry {
            c,
            h,
            w,
            k: kh,
            stride,
            pad: padding,
            ho,
            wo,
        };
        let (plen, n) = (geo.patch_len(), geo.out_len());
        let mut out = Tensor::zeros(&[b, co, ho, wo]);
        let mut cols = if geo.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; plen * n]
        };
        for i in 0..b {
            let img = &x.data()[i * c * h * w..(i + 1) * c * h * w];
            let patches: &[Real] = if geo.is_pointwise() {
                img
            } else {
                geo.im2col(img, &mut cols);
                &cols
            };
            let dst = &mut out.data_mut()[i * co * n..(i + 1) * co * n];
            gemm(co, plen, n, 1.0, wt.data(), (plen, 1), patches, (n, 1), 0.0, dst, (n, 1));
            if let Some(bv) = &bias_val {
                for (o, &bo) in bv.data().iter().enumerate() {
                    dst[o * n..(o + 1) * n].iter_mut().for_each(|v| *v += bo);
                }
            }
        }

        let need_x = self.requires_grad();
        let need_w = weight.requires_grad();
        let need_b = bias.map(|v| v.requires_grad()).unwrap_or(false);
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.tape().push(out, &inputs, move |g| {
            let mut dx = need_x.then(|| Tensor::zeros(&[b, c, h, w]));
            let mut dw = need_w.then(|| Tensor::zeros(&[co, c, kh, kw]));
            let mut cols = vec![0.0; if geo.is_pointwise() { 0 } else { plen * n }];
            let mut dcols = vec![0.0; if need_x && !geo.is_pointwise() { plen * n } else { 0 }];
            for i in 0..b {
                let gi = &g.data()[i * co * n..(i + 1) * co * n];
                if let Some(dw) = dw.as_mut() {
                    let img = &x.data()[i * c * h * w..(i + 1) * c * h * w];
                    let patches: &[Real] = if geo.is_pointwise() {
                        img
                    } else {
                        geo.im2col(img, &mut cols);
                        &cols
                    };
                    // dW += G · colsᵀ
                    gemm(co, n, plen, 1.0, gi, (n, 1), patches, (1, n), 1.0, dw.data_mut(), (plen, 1));
                }
                if let Some(dx) = dx.as_mut() {
                    let di = &mut dx.data_mut()[i * c * h * w..(i + 1) * c * h * w];
                    if geo.is_pointwise() {
                        gemm(plen, co, n, 1.0, wt.data(), (1, plen), gi, (n, 1), 0.0, di, (n, 1));
                    } else {
                        gemm(plen, co, n, 1.0, wt.data(), (1, plen), gi, (n, 1), 0.0, &mut dcols, (n, 1));
                        geo.col2im(&dcols, di);
                    }
                }
            }
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(need_b.then(|| {
                    let mut db = vec![0.0 as Real; co];
                    for i in 0..b {
                        for (o, acc) in db.iter_mut().enumerate() {
                            let off = (i * co + o) * n;
                            *acc += g.data()[off..off + n].iter().sum::<Real>();
                        }
                    }
                    Tensor::new(&[co], db).expect("bias")
                }));
            }
            grads
        }))
    }
}
