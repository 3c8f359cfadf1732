//! Central-difference gradient oracle.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

fn eval_at(f: &impl Fn(&mut Graph, Var) -> Result<Var>, x: Tensor, coord: usize) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.variable(x).map_err(|_| Error::NonFiniteProbe { coord })?;
    let out = match f(&mut g, xv) {
        Ok(v) => v,
        Err(Error::NonFinite { .. }) | Err(Error::DegenerateAxis { .. }) => {
            return Err(Error::NonFiniteProbe { coord })
        }
        Err(e) => return Err(e),
    };
    let t = g.value(out);
    if !t.is_scalar() {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    let v = t.item();
    if !v.is_finite() {
        return Err(Error::NonFiniteProbe { coord });
    }
    Ok(v)
}

/// Gradient of the scalar function `f` at `x` by reverse-mode differentiation.
pub fn analytic_gradient(
    f: &impl Fn(&mut Graph, Var) -> Result<Var>,
    x: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.variable(x.clone())?;
    let loss = f(&mut g, xv)?;
    if !g.value(loss).is_scalar() {
        return Err(Error::NonScalarLoss(g.shape(loss).to_vec()));
    }
    if !g.requires_grad(loss) {
        return Ok(Tensor::zeros(x.shape()));
    }
    g.backward(loss)?;
    Ok(g.grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape())))
}

/// Compares reverse-mode gradients of `f` at `x` against central
/// differences `(f(x+eps·e) − f(x−eps·e)) / (2·eps)` for every coordinate
/// and returns the worst relative error, with denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_difference_check_at(f, x, eps, &coords)
}

/// [`finite_difference_check`] restricted to the listed coordinates.
pub fn finite_difference_check_at<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::invalid(format!("eps {eps} outside (0, 1e-3]")));
    }
    if let Some(coord) = x.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteProbe { coord });
    }
    let analytic = analytic_gradient(&f, x)?;
    let mut worst: f64 = 0.0;
    for &i in coords {
        if i >= x.numel() {
            return Err(Error::invalid(format!("coordinate {i} out of range")));
        }
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval_at(&f, plus, i)? - eval_at(&f, minus, i)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
