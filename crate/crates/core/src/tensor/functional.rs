use rand::Rng as _;

use super::{Graph, Rng, Tensor, Var};
use crate::error::{Error, Result};

/// Tolerance on `Σp = 1` accepted by [`kl_divergence`].
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// `Σ pᵢ ln(pᵢ/qᵢ)` for two probability vectors, logs floored at 1e-12.
pub fn kl_divergence(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    let (tp, tq) = (g.value(p), g.value(q));
    if tp.shape().len() != 1 || tp.shape() != tq.shape() {
        return Err(Error::Shape {
            op: "kl_divergence",
            lhs: tp.shape().to_vec(),
            rhs: tq.shape().to_vec(),
        });
    }
    for t in [tp, tq] {
        let total: f64 = t.data().iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL || t.data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid(format!(
                "distribution sums to {total}, expected 1"
            )));
        }
    }
    g.kl_rows(p, q)
}

fn gumbel_noise(rng: &mut Rng) -> f64 {
    // u in (0, 1): reject the (measure-zero) endpoint.
    let mut u: f64 = rng.random();
    while u <= 0.0 {
        u = rng.random();
    }
    -(-u.ln()).ln()
}

/// Gumbel-Softmax relaxation over the rows of `logits`.
///
/// Soft rows are `softmax((logits + G) / temperature)` with i.i.d. Gumbel
/// noise `G`. With `hard`, the forward value is the row-wise one-hot argmax
/// and gradients flow through the soft rows (straight-through).
pub fn gumbel_softmax(
    g: &mut Graph,
    logits: Var,
    temperature: f64,
    rng: &mut Rng,
    hard: bool,
) -> Result<Var> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::invalid(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let shape = g.shape(logits).to_vec();
    let noise: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| gumbel_noise(rng))
        .collect();
    let noise = g.constant(Tensor::new(shape, noise)?)?;
    let perturbed = g.add(logits, noise)?;
    let scaled = g.scale(perturbed, 1.0 / temperature)?;
    let soft = g.softmax(scaled)?;
    if hard {
        g.straight_through(soft)
    } else {
        Ok(soft)
    }
}
