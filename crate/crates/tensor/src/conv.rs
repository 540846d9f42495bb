//! Spatial operations on `[N, C, H, W]` tensors.

use crate::error::{shape_err, Result};
use crate::linalg::gemm;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            dst[oy * self.wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w {
                                img[(c * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                img[(c * self.h + iy as usize) * self.w + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-axis bilinear sampling table: `(lower index, upper index, upper weight)`.
fn bilinear_taps(src: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..src * factor)
        .map(|dst| {
            let pos = ((dst as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

impl Tape {
    /// 2-d convolution of `x: [N, C, H, W]` with square kernels
    /// `weight: [O, C, k, k]` and optional `bias: [O]`, via im2col + matmul.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || stride == 0 {
            return shape_err(format!("conv2d: input {xs:?} incompatible with weight {ws:?}"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return shape_err(format!("conv2d: bias {:?} does not match {} filters", self.shape(b), ws[0]));
            }
        }
        let (n, o, k) = (xs[0], ws[0], ws[2]);
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return shape_err(format!("conv2d: kernel {k} larger than padded input {xs:?}"));
        }
        let geom = ConvGeom {
            c: xs[1],
            h: xs[2],
            w: xs[3],
            k,
            stride,
            pad,
            ho: (xs[2] + 2 * pad - k) / stride + 1,
            wo: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let (rows, p) = (geom.rows(), geom.positions());
        let img_len = geom.c * geom.h * geom.w;
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; n * rows * p] };
        let mut out = vec![0.0; n * o * p];
        {
            let (xd, wd) = (self.data(x), self.data(weight));
            for i in 0..n {
                let img = &xd[i * img_len..(i + 1) * img_len];
                let col: &[f64] = if geom.is_pointwise() {
                    img
                } else {
                    let c = &mut cols[i * rows * p..(i + 1) * rows * p];
                    geom.im2col(img, c);
                    c
                };
                gemm(o, rows, p, wd, false, col, false, 0.0, &mut out[i * o * p..(i + 1) * o * p]);
            }
            if let Some(b) = bias {
                let bd = self.data(b);
                for (chunk, &bv) in out.chunks_mut(p).zip(bd.iter().cycle()) {
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let value = Tensor::new(&[n, o, geom.ho, geom.wo], out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push("conv2d", value, &inputs, move |g, ctx| {
            let (xd, wd) = (ctx.value(x).data(), ctx.value(weight).data());
            let col_of = |i: usize| -> &[f64] {
                if geom.is_pointwise() {
                    &xd[i * img_len..(i + 1) * img_len]
                } else {
                    &cols[i * rows * p..(i + 1) * rows * p]
                }
            };
            if let Some(gw) = ctx.grad_mut(weight) {
                for i in 0..n {
                    gemm(o, p, rows, &g[i * o * p..(i + 1) * o * p], false, col_of(i), true, 1.0, gw);
                }
            }
            if let Some(b) = bias {
                if let Some(gb) = ctx.grad_mut(b) {
                    for (chunk, j) in g.chunks(p).zip((0..o).cycle()) {
                        gb[j] += chunk.iter().sum::<f64>();
                    }
                }
            }
            if let Some(gx) = ctx.grad_mut(x) {
                if geom.is_pointwise() {
                    for i in 0..n {
                        gemm(rows, o, p, wd, true, &g[i * o * p..(i + 1) * o * p], false, 1.0, &mut gx[i * img_len..(i + 1) * img_len]);
                    }
                } else {
                    let mut dcols = vec![0.0; rows * p];
                    for i in 0..n {
                        gemm(rows, o, p, wd, true, &g[i * o * p..(i + 1) * o * p], false, 0.0, &mut dcols);
                        geom.col2im(&dcols, &mut gx[i * img_len..(i + 1) * img_len]);
                    }
                }
            }
        })
    }

    /// Bilinear upsampling of `[N, C, H, W]` by an integer factor
    /// (half-pixel centers, edge clamped).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return shape_err(format!("upsample_bilinear: expected [N, C, H, W], got {s:?}"));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h * factor, w * factor);
        let (ty, tx) = (bilinear_taps(h, factor), bilinear_taps(w, factor));
        let src = self.data(x);
        let mut out = vec![0.0; planes * ho * wo];
        for pl in 0..planes {
            let img = &src[pl * h * w..(pl + 1) * h * w];
            let dst = &mut out[pl * ho * wo..(pl + 1) * ho * wo];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    dst[oy * wo + ox] = (1.0 - ly) * ((1.0 - lx) * img[y0 * w + x0] + lx * img[y0 * w + x1])
                        + ly * ((1.0 - lx) * img[y1 * w + x0] + lx * img[y1 * w + x1]);
                }
            }
        }
        let value = Tensor::new(&[s[0], s[1], ho, wo], out)?;
        self.push("upsample_bilinear", value, &[x], move |g, ctx| {
            if let Some(gx) = ctx.grad_mut(x) {
                for pl in 0..planes {
                    let gi = &mut gx[pl * h * w..(pl + 1) * h * w];
                    let go = &g[pl * ho * wo..(pl + 1) * ho * wo];
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let v = go[oy * wo + ox];
                            gi[y0 * w + x0] += (1.0 - ly) * (1.0 - lx) * v;
                            gi[y0 * w + x1] += (1.0 - ly) * lx * v;
                            gi[y1 * w + x0] += ly * (1.0 - lx) * v;
                            gi[y1 * w + x1] += ly * lx * v;
                        }
                    }
                }
            }
        })
    }

    /// Non-overlapping `k x k` average pooling of `[N, C, H, W]`.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return shape_err(format!("avg_pool2d: {s:?} not divisible into {k}x{k} windows"));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / k, w / k);
        let norm = 1.0 / (k * k) as f64;
        let src = self.data(x);
        let mut out = vec![0.0; planes * ho * wo];
        for pl in 0..planes {
            for y in 0..h {
                for xx in 0..w {
                    out[(pl * ho + y / k) * wo + xx / k] += src[(pl * h + y) * w + xx] * norm;
                }
            }
        }
        let value = Tensor::new(&[s[0], s[1], ho, wo], out)?;
        self.push("avg_pool2d", value, &[x], move |g, ctx| {
            if let Some(gx) = ctx.grad_mut(x) {
                for pl in 0..planes {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[(pl * h + y) * w + xx] += g[(pl * ho + y / k) * wo + xx / k] * norm;
                        }
                    }
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        for b in 0..n {
            for f in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ch in 0..c {
                            for i in 0..k {
                                for j in 0..k {
                                    let iy = (oy * stride + i) as isize - pad as isize;
                                    let ix = (ox * stride + j) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.at(&[b, ch, iy as usize, ix as usize]) * w.at(&[f, ch, i, j]);
                                    }
                                }
                            }
                        }
                        let off = out.offset(&[b, f, oy, ox]);
                        out.data_mut()[off] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0)] {
            let x = Tensor::from_fn(&[2, 3, 6, 6], |i| ((i * 7 % 11) as f64 - 5.0) * 0.1);
            let w = Tensor::from_fn(&[4, 3, k, k], |i| ((i * 5 % 13) as f64 - 6.0) * 0.05);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            let y = tape.conv2d(xv, wv, None, stride, pad).unwrap();
            let expected = naive_conv(&x, &w, stride, pad);
            assert_eq!(tape.shape(y), expected.shape());
            for (a, b) in tape.data(y).iter().zip(expected.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_preserves_constants_and_doubles_dims() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, 3, 4], 0.7));
        let y = tape.upsample_bilinear(x, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 6, 8]);
        assert!(tape.data(y).iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn upsample_interpolates_half_pixel_centers() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![0.0, 1.0]).unwrap());
        let y = tape.upsample_bilinear(x, 2).unwrap();
        assert_eq!(tape.data(y), &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn average_pooling() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 2, 4], |i| i as f64));
        let y = tape.avg_pool2d(x, 2).unwrap();
        assert_eq!(tape.data(y), &[2.5, 4.5]);
        assert!(tape.avg_pool2d(x, 3).is_err());
    }
}
