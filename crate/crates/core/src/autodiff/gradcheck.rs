//! Central-difference gradient checking.

use super::graph::{Graph, Mode, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Max over coordinates of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`
/// for a scalar function of one tensor.
pub fn gradient_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    gradient_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), h)
}

/// Same as [`gradient_check`] over several input tensors at once.
pub fn gradient_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    gradient_check_mode(Mode::Eval, f, inputs, h)
}

/// [`gradient_check_many`] on graphs built in `mode`, e.g. to fix dropout masks.
pub fn gradient_check_mode<F>(mode: Mode, f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(mode);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    check_finite(g.value(loss).item())?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.tensor(v)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(mode);
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let v = g.value(loss).item();
        check_finite(v)?;
        Ok(v)
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for (i, an) in analytic.iter().enumerate() {
        for j in 0..an.numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = an.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("gradient_check objective = {v}")))
    }
}
