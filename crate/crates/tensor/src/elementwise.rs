//! Elementwise unary and broadcasting binary operations.

use crate::error::{shape_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Numpy-style broadcast of two shapes (right-aligned, size-1 axes stretch).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return shape_err(format!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast `out` shape; broadcast
/// axes get stride 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank];
    let mut o = 0;
    for _ in 0..outer {
        let base_a: usize = (0..rank - 1).map(|d| idx[d] * sa[d]).sum();
        let base_b: usize = (0..rank - 1).map(|d| idx[d] * sb[d]).sum();
        for j in 0..inner {
            f(o, base_a + j * ia_step, base_b + j * ib_step);
            o += 1;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Sums `g` (shaped like `out`) down to `shape`.
pub(crate) fn reduce_to(g: &[f64], out: &[usize], shape: &[usize]) -> Vec<f64> {
    let numel: usize = shape.iter().product();
    if out == shape {
        return g.to_vec();
    }
    let mut acc = vec![0.0; numel];
    let s = broadcast_strides(shape, out);
    let zero = vec![0; out.len()];
    for_each_broadcast(out, &s, &zero, |o, i, _| acc[i] += g[o]);
    acc
}

impl Tape {
    /// Broadcasting binary op. `df(a, b)` returns `(dy/da, dy/db)`.
    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: fn(f64, f64) -> f64,
        df: fn(f64, f64) -> (f64, f64),
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)?;
        let (da, db) = (self.data(a), self.data(b));
        let data = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let (stra, strb) = (broadcast_strides(&sa, &out_shape), broadcast_strides(&sb, &out_shape));
            let mut out = vec![0.0; out_shape.iter().product()];
            for_each_broadcast(&out_shape, &stra, &strb, |o, i, j| out[o] = f(da[i], db[j]));
            out
        };
        let value = Tensor::new(&out_shape, data)?;
        self.push(op, value, &[a, b], move |g, ctx| {
            let (av, bv) = (ctx.value(a).data(), ctx.value(b).data());
            let mut ga = ctx.wants(a).then(|| vec![0.0; av.len()]);
            let mut gb = ctx.wants(b).then(|| vec![0.0; bv.len()]);
            if sa == sb {
                for o in 0..g.len() {
                    let (pa, pb) = df(av[o], bv[o]);
                    if let Some(ga) = ga.as_mut() {
                        ga[o] += g[o] * pa;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[o] += g[o] * pb;
                    }
                }
            } else {
                let (stra, strb) = (broadcast_strides(&sa, &out_shape), broadcast_strides(&sb, &out_shape));
                for_each_broadcast(&out_shape, &stra, &strb, |o, i, j| {
                    let (pa, pb) = df(av[i], bv[j]);
                    if let Some(ga) = ga.as_mut() {
                        ga[i] += g[o] * pa;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[j] += g[o] * pb;
                    }
                });
            }
            if let Some(ga) = ga {
                ctx.accumulate(a, &ga);
            }
            if let Some(gb) = gb {
                ctx.accumulate(b, &gb);
            }
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |_, _| (1.0, 1.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |_, _| (1.0, -1.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |x, y| (y, x))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, |x, y| (1.0 / y, -x / (y * y)))
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, f64::min, |x, y| if x <= y { (1.0, 0.0) } else { (0.0, 1.0) })
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, f64::max, |x, y| if x >= y { (1.0, 0.0) } else { (0.0, 1.0) })
    }

    /// Elementwise map with derivative `df(x, y)` evaluated at input `x` and
    /// output `y`.
    pub fn map(
        &mut self,
        op: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect())?;
        let out = self.next_var();
        self.push(op, value, &[x], move |g, ctx| {
            let (xv, yv) = (ctx.value(x).data(), ctx.value(out).data());
            if let Some(gx) = ctx.grad_mut(x) {
                for i in 0..gx.len() {
                    gx[i] += g[i] * df(xv[i], yv[i]);
                }
            }
        })
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.map("neg", x, |v| -v, |_, _| -1.0)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("scale", x, move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("add_scalar", x, move |v| v + c, |_, _| 1.0)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, f64::exp, |_, y| y)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map("log", x, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.map("sqrt", x, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map("square", x, |v| v * v, |x, _| 2.0 * x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map("abs", x, f64::abs, |x, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, sigmoid, |_, y| y * (1.0 - y))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map("softplus", x, softplus, |x, _| sigmoid(x))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[3, 1, 4], &[5, 1]).unwrap(), vec![3, 5, 4]);
        assert_eq!(broadcast_shape(&[4], &[2, 4]).unwrap(), vec![2, 4]);
        assert!(broadcast_shape(&[3], &[4]).is_err());
    }

    #[test]
    fn broadcast_add_and_reduce() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64).with_grad());
        let b = tape.leaf(Tensor::new(&[3], vec![10.0, 20.0, 30.0]).unwrap().with_grad());
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.data(c), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.get(a).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn column_broadcast() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let b = tape.constant(Tensor::new(&[2, 1], vec![1.0, -1.0]).unwrap());
        let c = tape.mul(a, b).unwrap();
        assert_eq!(tape.data(c), &[0.0, 1.0, 2.0, -3.0, -4.0, -5.0]);
    }

    #[test]
    fn stable_scalar_helpers() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-12);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
