use crate::error::{shape_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `c = beta * c + op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is
/// `k x n`. A transposed operand is stored in its untransposed row-major
/// layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the m*k, k*n and m*n elements the
    // strides address, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    /// Matrix product of `a: [m, k]` and `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul: cannot multiply {sa:?} by {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, 0.0, &mut out);
        let value = Tensor::new(&[m, n], out)?;
        self.push("matmul", value, &[a, b], move |g, ctx| {
            let (av, bv) = (ctx.value(a).data(), ctx.value(b).data());
            if let Some(ga) = ctx.grad_mut(a) {
                gemm(m, n, k, g, false, bv, true, 1.0, ga);
            }
            if let Some(gb) = ctx.grad_mut(b) {
                gemm(k, m, n, av, true, g, false, 1.0, gb);
            }
        })
    }

    /// Batched matrix product of `a: [B, m, k]` and `b: [B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return shape_err(format!("bmm: cannot multiply {sa:?} by {sb:?}"));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    false,
                    &bd[i * k * n..(i + 1) * k * n],
                    false,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let value = Tensor::new(&[batch, m, n], out)?;
        self.push("bmm", value, &[a, b], move |g, ctx| {
            let (av, bv) = (ctx.value(a).data(), ctx.value(b).data());
            if let Some(ga) = ctx.grad_mut(a) {
                for i in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &bv[i * k * n..(i + 1) * k * n],
                        true,
                        1.0,
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                }
            }
            if let Some(gb) = ctx.grad_mut(b) {
                for i in 0..batch {
                    gemm(
                        k,
                        m,
                        n,
                        &av[i * m * k..(i + 1) * m * k],
                        true,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        1.0,
                        &mut gb[i * k * n..(i + 1) * k * n],
                    );
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_evaluated_product() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.data(c), &[3.0, 7.0]);
    }

    #[test]
    fn identity_is_neutral() {
        let mut tape = Tape::new();
        let m = Tensor::new(&[3, 2], vec![1.5, -2.0, 0.0, 4.0, 9.0, -1.0]).unwrap();
        let i = tape.constant(Tensor::eye(3));
        let mv = tape.constant(m.clone());
        let c = tape.matmul(i, mv).unwrap();
        assert_eq!(tape.data(c), m.data());
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn sum_of_product_gradient_is_ones_times_b_transpose() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(&[2, 3], (0..6).map(|v| v as f64).collect()).unwrap().with_grad());
        let bt = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = tape.constant(bt);
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        // ones(2x2) * B^T: each row is the row sums of B.
        assert_eq!(g.get(a).unwrap(), &[3.0, 7.0, 11.0, 3.0, 7.0, 11.0]);
    }

    #[test]
    fn bmm_matches_per_batch_matmul() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[2, 2, 3], |i| i as f64 * 0.5 - 1.0));
        let b = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| (i as f64).sin()));
        let c = tape.bmm(a, b).unwrap();
        for batch in 0..2 {
            let a2 = tape.constant(Tensor::new(&[2, 3], tape.data(a)[batch * 6..batch * 6 + 6].to_vec()).unwrap());
            let b2 = tape.constant(Tensor::new(&[3, 2], tape.data(b)[batch * 6..batch * 6 + 6].to_vec()).unwrap());
            let c2 = tape.matmul(a2, b2).unwrap();
            assert_eq!(&tape.data(c)[batch * 4..batch * 4 + 4], tape.data(c2));
        }
    }
}
