//! Shape manipulation: reshape, permute, slicing, concatenation, gathers.

use crate::elementwise::{broadcast_shape, reduce_to};
use crate::error::{shape_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// For each output position of `permute(shape, axes)`, the source offset.
fn permute_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let src_strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let numel: usize = shape.iter().product();
    let mut index = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..numel {
        index.push(off);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    index
}

impl Tape {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != t.numel() {
            return shape_err(format!("reshape: {:?} cannot become {shape:?}", t.shape()));
        }
        let value = Tensor::new(shape, t.data().to_vec())?;
        self.push("reshape", value, &[x], move |g, ctx| ctx.accumulate(x, g))
    }

    /// Reorders axes so that output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return shape_err(format!("permute: {axes:?} is not a permutation of the axes of {shape:?}"));
        }
        let index = permute_index(&shape, axes);
        let src = self.data(x);
        let data: Vec<f64> = index.iter().map(|&i| src[i]).collect();
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let value = Tensor::new(&out_shape, data)?;
        self.push("permute", value, &[x], move |g, ctx| {
            if let Some(gx) = ctx.grad_mut(x) {
                for (o, &i) in index.iter().enumerate() {
                    gx[i] += g[o];
                }
            }
        })
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return shape_err(format!("transpose: rank {rank} tensor"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return shape_err(format!("narrow: axis {axis} range {start}+{len} invalid for {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, data)?;
        self.push("narrow", value, &[x], move |g, ctx| {
            if let Some(gx) = ctx.grad_mut(x) {
                for o in 0..outer {
                    let base = (o * dim + start) * inner;
                    let chunk = &g[o * len * inner..(o + 1) * len * inner];
                    gx[base..base + len * inner].iter_mut().zip(chunk).for_each(|(d, s)| *d += s);
                }
            }
        })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("concat: no inputs");
        };
        let base_shape = self.shape(first).to_vec();
        if axis >= base_shape.len() {
            return shape_err(format!("concat: axis {axis} out of range for {base_shape:?}"));
        }
        let mut dims = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base_shape.len()
                && s.iter().zip(&base_shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err(format!("concat: {s:?} does not match {base_shape:?} off axis {axis}"));
            }
            dims.push(s[axis]);
        }
        let outer: usize = base_shape[..axis].iter().product();
        let inner: usize = base_shape[axis + 1..].iter().product();
        let total: usize = dims.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &d) in xs.iter().zip(&dims) {
                data.extend_from_slice(&self.data(x)[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut out_shape = base_shape;
        out_shape[axis] = total;
        let value = Tensor::new(&out_shape, data)?;
        let inputs = xs.to_vec();
        self.push("concat", value, xs, move |g, ctx| {
            let mut offset = 0;
            for (&x, &d) in inputs.iter().zip(&dims) {
                if let Some(gx) = ctx.grad_mut(x) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + d) * inner];
                        gx[o * d * inner..(o + 1) * d * inner].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
                offset += d;
            }
        })
    }

    /// Gathers rows of `x` (along axis 0). Used for embedding lookup.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if indices.is_empty() {
            return shape_err("index_select: empty index list");
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[0]) {
            return shape_err(format!("index_select: row {bad} out of range for {shape:?}"));
        }
        let row: usize = shape[1..].iter().product();
        let src = self.data(x);
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let value = Tensor::new(&out_shape, data)?;
        let indices = indices.to_vec();
        self.push("index_select", value, &[x], move |g, ctx| {
            if let Some(gx) = ctx.grad_mut(x) {
                for (k, &i) in indices.iter().enumerate() {
                    gx[i * row..(i + 1) * row].iter_mut().zip(&g[k * row..(k + 1) * row]).for_each(|(a, b)| *a += b);
                }
            }
        })
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        if self.shape(table).len() != 2 {
            return shape_err(format!("embedding: table must be 2-d, got {:?}", self.shape(table)));
        }
        self.index_select(table, ids)
    }

    /// Repeats `x` along broadcast axes to reach `shape`.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src_shape = self.shape(x).to_vec();
        if broadcast_shape(&src_shape, shape)? != shape {
            return shape_err(format!("broadcast_to: {src_shape:?} cannot expand to {shape:?}"));
        }
        let value = {
            let t = self.value(x);
            let mut out = Tensor::zeros(shape);
            let index = reduce_to_index(&src_shape, shape);
            for (o, &i) in index.iter().enumerate() {
                out.data_mut()[o] = t.data()[i];
            }
            out
        };
        let out_shape = shape.to_vec();
        self.push("broadcast_to", value, &[x], move |g, ctx| {
            let reduced = reduce_to(g, &out_shape, &src_shape);
            ctx.accumulate(x, &reduced);
        })
    }
}

/// Source offset in `src` for every element of the broadcast `out` shape.
fn reduce_to_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - src.len();
    let src_strides = contiguous_strides(src);
    let numel: usize = out.iter().product();
    let mut idx = vec![0usize; out.len()];
    let mut result = Vec::with_capacity(numel);
    for _ in 0..numel {
        let mut off = 0;
        for d in offset..out.len() {
            if src[d - offset] != 1 {
                off += idx[d] * src_strides[d - offset];
            }
        }
        result.push(off);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    result
}
