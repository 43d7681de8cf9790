//! Central finite-difference gradient checks.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares tape gradients of `f` at `x` with central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several inputs at once; the error is the maximum
/// over every coordinate of every input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(Error::shape(
                "grad_check",
                "output elements",
                1,
                g.value(out).len(),
            ));
        }
        Ok((g, vars, out))
    };

    let (g, vars, out) = eval(inputs)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t))
        .collect();

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for k in 0..inputs.len() {
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let (gp, _, op) = eval(&probe)?;
            let fp = gp.value(op).item();
            probe[k].data_mut()[i] = orig - eps;
            let (gm, _, om) = eval(&probe)?;
            let fm = gm.value(om).item();
            probe[k].data_mut()[i] = orig;

            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[k].data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
