//! Central-difference gradient verification.

use super::{Tape, Var};
use crate::error::{GrpError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Below this magnitude errors are measured absolutely rather than relative
/// to the gradient, so round-off on near-zero entries cannot dominate.
const RELATIVE_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    /// Compares analytic against numeric gradients element by element.
    pub fn compare(analytic: &[Tensor], numeric: &[Tensor], tol: f64) -> Result<Self> {
        if analytic.len() != numeric.len() {
            return Err(GrpError::dim("gradient lists differ in length"));
        }
        let mut max_rel_error = 0.0;
        let mut worst = None;
        let mut checked = 0;
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            if a.shape() != n.shape() {
                return Err(GrpError::dim(format!("gradient {i} shapes differ")));
            }
            for (k, (&av, &nv)) in a.as_slice().iter().zip(n.as_slice()).enumerate() {
                if !av.is_finite() || !nv.is_finite() {
                    return Err(GrpError::Numeric(format!(
                        "non-finite gradient at input {i} element {k}: analytic {av}, numeric {nv}"
                    )));
                }
                let err = (av - nv).abs() / av.abs().max(nv.abs()).max(RELATIVE_FLOOR);
                if err > max_rel_error || worst.is_none() {
                    max_rel_error = err;
                    worst = Some((i, k));
                }
                checked += 1;
            }
        }
        Ok(GradCheckReport {
            max_rel_error,
            worst,
            checked,
            tol,
            passed: max_rel_error <= tol,
        })
    }
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(GrpError::dim("grad_check function must be scalar-valued"));
    }
    let s = v.item();
    if !s.is_finite() {
        return Err(GrpError::Numeric(format!("function value {s} is not finite")));
    }
    Ok(s)
}

/// Analytic gradients of a scalar tape function with respect to each input.
pub fn analytic_gradient<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    Ok(vars.iter().map(|&v| tape.grad(v).clone()).collect())
}

/// Central differences `(f(x+h) − f(x−h)) / 2h` for every input element.
pub fn numeric_gradient<F>(f: &F, inputs: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].rows(), inputs[i].cols());
        for k in 0..inputs[i].len() {
            let x0 = inputs[i].as_slice()[k];
            work[i].as_mut_slice()[k] = x0 + step;
            let fp = eval_scalar(f, &work)?;
            work[i].as_mut_slice()[k] = x0 - step;
            let fm = eval_scalar(f, &work)?;
            work[i].as_mut_slice()[k] = x0;
            g.as_mut_slice()[k] = (fp - fm) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Checks the tape gradient of a scalar function against central differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradient(&f, inputs)?;
    let numeric = numeric_gradient(&f, inputs, step)?;
    GradCheckReport::compare(&analytic, &numeric, tol)
}

/// Checks gradients of a scalar loss with respect to every parameter in
/// `store`. `f` builds the loss on the supplied tape from the supplied store.
pub fn grad_check_params<F>(
    f: F,
    store: &ParamStore,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut grads = store.clone();
    grads.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, &grads)?;
    tape.backward(out)?;
    tape.accumulate_into(&mut grads);
    let analytic: Vec<Tensor> = grads.iter().map(|(_, p)| p.grad.clone()).collect();

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::inference();
        let out = f(&mut t, s)?;
        let v = t.scalar(out);
        if !v.is_finite() {
            return Err(GrpError::Numeric(format!("loss {v} is not finite")));
        }
        Ok(v)
    };
    let mut work = store.clone();
    let mut numeric = Vec::with_capacity(store.len());
    for id in store.ids() {
        let n = store.value(id).len();
        let (rows, cols) = store.value(id).shape();
        let mut g = Tensor::zeros(rows, cols);
        for k in 0..n {
            let x0 = store.value(id).as_slice()[k];
            work.value_mut(id).as_mut_slice()[k] = x0 + step;
            let fp = eval(&work)?;
            work.value_mut(id).as_mut_slice()[k] = x0 - step;
            let fm = eval(&work)?;
            work.value_mut(id).as_mut_slice()[k] = x0;
            g.as_mut_slice()[k] = (fp - fm) / (2.0 * step);
        }
        numeric.push(g);
    }
    GradCheckReport::compare(&analytic, &numeric, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(t: &mut Tape, v: &[Var]) -> Result<Var> {
        t.dot(v[0], v[0])
    }

    #[test]
    fn square_passes() {
        let r = grad_check(square, &[Tensor::vector(vec![3.0])], 1e-5, 1e-4).unwrap();
        assert!(r.passed);
        assert!(r.max_rel_error < 1e-8);
        assert_eq!(r.checked, 1);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let inputs = [Tensor::vector(vec![3.0])];
        let mut analytic = analytic_gradient(&square, &inputs).unwrap();
        assert!((analytic[0].item() - 6.0).abs() < 1e-12);
        analytic[0].as_mut_slice()[0] *= 1.1;
        let numeric = numeric_gradient(&square, &inputs, 1e-5).unwrap();
        let r = GradCheckReport::compare(&analytic, &numeric, 1e-4).unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn non_finite_is_a_numeric_error() {
        let f = |t: &mut Tape, v: &[Var]| -> Result<Var> { Ok(t.scale(v[0], f64::INFINITY)) };
        let r = grad_check(f, &[Tensor::scalar(1.0)], 1e-5, 1e-4);
        assert!(matches!(r, Err(GrpError::Numeric(_))));
    }
}
