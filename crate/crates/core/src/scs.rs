//! Stage-refined context sampling: per layer and modality, a binary
//! keep/drop decision over positions, conditioned on local features and on
//! the mean of the content kept by the previous layer.

use crate::error::{Error, Result};
use crate::nn::{Mlp, Session};
use crate::tensor::{Graph, ParamStore, Rng, Tensor, Var};

/// Binary keep (`true`) / drop (`false`) decision per position.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskVector(Vec<bool>);

impl MaskVector {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![false; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|&b| b)
    }

    /// True when every kept position here is also kept in `outer`.
    pub fn is_nested_in(&self, outer: &MaskVector) -> bool {
        self.len() == outer.len() && self.0.iter().zip(&outer.0).all(|(&a, &b)| !a || b)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
    }

    fn from_values(values: &[f64]) -> Self {
        Self(values.iter().map(|&v| v > 0.5).collect())
    }
}

/// A mask recorded on a graph: the binary decision plus the variable that
/// carries its (straight-through) gradient.
#[derive(Clone, Debug)]
pub struct LayerMask {
    pub var: Var,
    pub mask: MaskVector,
}

impl LayerMask {
    /// Non-differentiable mask.
    pub fn constant(g: &mut Graph, mask: MaskVector) -> Result<Self> {
        let var = g.constant(mask.to_tensor())?;
        Ok(Self { var, mask })
    }
}

#[derive(Clone, Debug)]
pub struct ScsParams {
    pub local: Mlp,
    pub global: Mlp,
    pub decide: Mlp,
}

impl ScsParams {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d: usize) -> Self {
        Self {
            local: Mlp::new(store, rng, &format!("{name}.local"), d, d, d),
            global: Mlp::new(store, rng, &format!("{name}.global"), d, d, d),
            decide: Mlp::new(store, rng, &format!("{name}.decide"), 2 * d, d, 2),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScsOutput {
    /// Keep-channel probability per position, shape `[n]`.
    pub keep_probs: Var,
    pub mask: LayerMask,
}

/// Mean of the rows of `x` selected by `m`: `Σ xᵢ·mᵢ / max(Σ mᵢ, 1)`.
/// Gives the zero vector when nothing is kept.
pub fn masked_gap(g: &mut Graph, x: Var, m: Var) -> Result<Var> {
    let n = g.shape(x)[0];
    if g.value(m).numel() != n {
        return Err(Error::Shape {
            op: "masked_gap",
            lhs: g.shape(x).to_vec(),
            rhs: g.shape(m).to_vec(),
        });
    }
    let row = g.reshape(m, &[1, n])?;
    let total = g.matmul(row, x)?;
    let count = g.sum(m)?;
    let count = g.clamp_min(count, 1.0)?;
    g.div_scalar(total, count)
}

/// One sampling step. `eligible` forces positions to drop regardless of the
/// sample (special tokens); the returned mask is `sample ⊙ prev ⊙ eligible`.
pub fn scs_forward(
    s: &mut Session<'_>,
    params: &ScsParams,
    features: Var,
    prev: &LayerMask,
    eligible: Option<&MaskVector>,
    temperature: f64,
) -> Result<ScsOutput> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::invalid(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let n = s.graph.shape(features)[0];
    if prev.mask.len() != n || eligible.is_some_and(|e| e.len() != n) {
        return Err(Error::Shape {
            op: "scs_forward",
            lhs: vec![n],
            rhs: vec![prev.mask.len()],
        });
    }
    let z = params.local.forward(s, features)?;
    let gl = params.global.forward(s, features)?;
    let gap = masked_gap(s.graph, gl, prev.var)?;
    let gap = s.graph.broadcast_rows(gap, n)?;
    let joint = s.graph.concat_cols(&[z, gap])?;
    let logits = params.decide.forward(s, joint)?;
    let probs = s.graph.softmax(logits)?;
    let keep = s.graph.slice_cols(probs, 0, 1)?;
    let keep_probs = s.graph.reshape(keep, &[n])?;

    let decision = match s.gumbel_hard(logits, temperature)? {
        Some(sample) => {
            let col = s.graph.slice_cols(sample, 0, 1)?;
            s.graph.reshape(col, &[n])?
        }
        None => {
            let p = s.graph.value(probs);
            let bits = (0..n).map(|i| p.get(i, 0) >= p.get(i, 1)).collect();
            s.graph.constant(MaskVector(bits).to_tensor())?
        }
    };
    let mut mask = s.graph.mul(decision, prev.var)?;
    if let Some(e) = eligible {
        let e = s.graph.constant(e.to_tensor())?;
        mask = s.graph.mul(mask, e)?;
    }
    let bits = MaskVector::from_values(s.graph.value(mask).data());
    Ok(ScsOutput {
        keep_probs,
        mask: LayerMask {
            var: mask,
            mask: bits,
        },
    })
}
