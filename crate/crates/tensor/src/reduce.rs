//! Reductions and normalizations along an axis.

use crate::error::{shape_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Splits `shape` around `axis` into `(outer, dim, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.data(x).iter().sum();
        self.push("sum", Tensor::scalar(total), &[x], move |g, ctx| {
            if let Some(gx) = ctx.grad_mut(x) {
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
        })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums over `axis`, removing it (a rank-1 input yields shape `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err(format!("sum_axis: axis {axis} out of range for {shape:?}"));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..dim {
                let row = &src[(o * dim + k) * inner..(o * dim + k + 1) * inner];
                out[o * inner..(o + 1) * inner].iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Tensor::new(&out_shape, out)?;
        self.push("sum_axis", value, &[x], move |g, ctx| {
            if let Some(gx) = ctx.grad_mut(x) {
                for o in 0..outer {
                    for k in 0..dim {
                        let dst = &mut gx[(o * dim + k) * inner..(o * dim + k + 1) * inner];
                        dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]).for_each(|(a, b)| *a += b);
                    }
                }
            }
        })
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let dim = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| crate::TensorError::Shape(format!("mean_axis: axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / dim as f64)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err(format!("softmax: axis {axis} out of range for {shape:?}"));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * dim + k) * inner + i;
                let max = (0..dim).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..dim {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..dim {
                    out[at(k)] /= total;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        let y = self.next_var();
        self.push("softmax", value, &[x], move |g, ctx| {
            let yv = ctx.value(y).data();
            if let Some(gx) = ctx.grad_mut(x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * dim + k) * inner + i;
                        let dot: f64 = (0..dim).map(|k| g[at(k)] * yv[at(k)]).sum();
                        for k in 0..dim {
                            gx[at(k)] += yv[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
            }
        })
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err(format!("log_softmax: axis {axis} out of range for {shape:?}"));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * dim + k) * inner + i;
                let max = (0..dim).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..dim).map(|k| (src[at(k)] - max).exp()).sum::<f64>().ln();
                for k in 0..dim {
                    out[at(k)] = src[at(k)] - lse;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        let y = self.next_var();
        self.push("log_softmax", value, &[x], move |g, ctx| {
            let yv = ctx.value(y).data();
            if let Some(gx) = ctx.grad_mut(x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * dim + k) * inner + i;
                        let gsum: f64 = (0..dim).map(|k| g[at(k)]).sum();
                        for k in 0..dim {
                            gx[at(k)] += g[at(k)] - yv[at(k)].exp() * gsum;
                        }
                    }
                }
            }
        })
    }

    /// Normalizes over the last axis, then applies `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("tensors have rank >= 1");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err(format!(
                "layer_norm: gamma {:?} / beta {:?} must be [{d}] for input {shape:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let rows = self.value(x).numel() / d;
        let (src, gm, bt) = (self.data(x), self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gm[j] * h + bt[j];
            }
        }
        let value = Tensor::new(&shape, out)?;
        self.push("layer_norm", value, &[x, gamma, beta], move |g, ctx| {
            let gm = ctx.value(gamma).data();
            if ctx.wants(x) {
                let mut gx = vec![0.0; g.len()];
                for r in 0..rows {
                    let (gr, hr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                    let dh: Vec<f64> = (0..d).map(|j| gr[j] * gm[j]).collect();
                    let mean_dh = dh.iter().sum::<f64>() / d as f64;
                    let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx[r * d + j] = inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                ctx.accumulate(x, &gx);
            }
            if let Some(gg) = ctx.grad_mut(gamma) {
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(gb) = ctx.grad_mut(beta) {
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
            }
        })
    }
}
