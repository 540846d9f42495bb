//! Central finite-difference verification of tape gradients.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gradient norms below this are compared absolutely rather than relatively.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)` in the Euclidean norm.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(REL_ERROR_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Relative error per input tensor.
    pub per_input: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(TensorError::Contract(format!("gradcheck target has shape {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Analytic gradients of the scalar `f(inputs)` for every input.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars.iter().zip(inputs).map(|(&v, t)| grads.get_or_zeros(v, t.numel())).collect())
}

/// Central-difference gradients of `f` for every element of every input.
pub fn numeric_gradients<F>(f: &F, inputs: &[Tensor], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval_scalar(f, &work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval_scalar(f, &work)?;
            work[i].data_mut()[j] = orig;
            *gj = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Full elementwise check: every coordinate of every input.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, inputs)?;
    let numeric = numeric_gradients(&f, inputs, h)?;
    let per_input = analytic.iter().zip(&numeric).map(|(a, n)| relative_error(a, n)).collect();
    Ok(GradCheckReport { per_input })
}

/// Directional check for inputs too large to difference coordinate by
/// coordinate: for each input, compares `grad . u` against the central
/// difference along a random unit direction `u`.
pub fn check_directional<F, R>(f: F, inputs: &[Tensor], h: f64, rng: &mut R) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let analytic = analytic_gradients(&f, inputs)?;
    let mut work = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut dir = Tensor::randn(inputs[i].shape(), 1.0, rng).into_data();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let shifted = |sign: f64| -> Vec<f64> {
            inputs[i].data().iter().zip(&dir).map(|(x, u)| x + sign * h * u).collect()
        };
        work[i] = Tensor::new(inputs[i].shape(), shifted(1.0))?;
        let plus = eval_scalar(&f, &work)?;
        work[i] = Tensor::new(inputs[i].shape(), shifted(-1.0))?;
        let minus = eval_scalar(&f, &work)?;
        work[i] = inputs[i].clone();
        let numeric = (plus - minus) / (2.0 * h);
        let projected: f64 = analytic[i].iter().zip(&dir).map(|(g, u)| g * u).sum();
        per_input.push(relative_error(&[projected], &[numeric]));
    }
    Ok(GradCheckReport { per_input })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // Analytic gradient 2x compared against a deliberately flipped one.
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let f = |t: &mut Tape, v: &[Var]| {
            let sq = t.mul(v[0], v[0])?;
            t.sum(sq)
        };
        let numeric = numeric_gradients(&f, &[x.clone()], 1e-5).unwrap();
        let flipped: Vec<f64> = x.data().iter().map(|v| -2.0 * v).collect();
        assert!(relative_error(&flipped, &numeric[0]) > 1.0);
        assert!(check_gradients(f, &[x], 1e-5).unwrap().passes(1e-8));
    }
}
