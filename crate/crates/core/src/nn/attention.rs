use super::{Linear, Session};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Rng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d: usize,
    pub heads: usize,
}

impl AttentionConfig {
    pub fn new(d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d == 0 || !d.is_multiple_of(heads) {
            return Err(Error::invalid(format!(
                "{heads} heads do not divide width {d}"
            )));
        }
        Ok(Self { d, heads })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// Multi-head scaled dot-product attention with an optional additive mask.
///
/// The key projection carries no bias: a key bias shifts every logit of a
/// query row by the same amount and cancels in the softmax.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, cfg: AttentionConfig) -> Self {
        let d = cfg.d;
        Self {
            cfg,
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            k: Linear::with_bias(store, rng, &format!("{name}.k"), d, d, false),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d),
        }
    }

    pub fn forward(
        &self,
        s: &mut Session<'_>,
        q_in: Var,
        kv_in: Var,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        self.forward_with_weights(s, q_in, kv_in, mask)
            .map(|(out, _)| out)
    }

    /// Also returns each head's `n_q×n_kv` attention weights.
    pub fn forward_with_weights(
        &self,
        s: &mut Session<'_>,
        q_in: Var,
        kv_in: Var,
        mask: Option<&Tensor>,
    ) -> Result<(Var, Vec<Var>)> {
        let (n_q, n_kv) = (s.graph.shape(q_in)[0], s.graph.shape(kv_in)[0]);
        if let Some(m) = mask {
            validate_mask(m, n_q, n_kv)?;
        }
        let q = self.q.forward(s, q_in)?;
        let k = self.k.forward(s, kv_in)?;
        let v = self.v.forward(s, kv_in)?;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        let mut weights = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let (qh, kh, vh) = if self.cfg.heads == 1 {
                (q, k, v)
            } else {
                (
                    s.graph.slice_cols(q, h * dh, dh)?,
                    s.graph.slice_cols(k, h * dh, dh)?,
                    s.graph.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = s.graph.matmul_nt(qh, kh)?;
            let scores = s.graph.scale(scores, scale)?;
            let w = match mask {
                Some(m) => s.graph.softmax_masked(scores, m)?,
                None => s.graph.softmax(scores)?,
            };
            heads.push(s.graph.matmul(w, vh)?);
            weights.push(w);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            s.graph.concat_cols(&heads)?
        };
        Ok((self.o.forward(s, cat)?, weights))
    }
}

fn validate_mask(m: &Tensor, n_q: usize, n_kv: usize) -> Result<()> {
    if m.shape() != [n_q, n_kv] {
        return Err(Error::Shape {
            op: "attention_mask",
            lhs: m.shape().to_vec(),
            rhs: vec![n_q, n_kv],
        });
    }
    for r in 0..n_q {
        let row = m.row(r);
        if row.iter().any(|&v| v != 0.0 && v != f64::NEG_INFINITY) {
            return Err(Error::invalid("attention mask entries must be 0 or -inf"));
        }
        if row.iter().all(|&v| v == f64::NEG_INFINITY) {
            return Err(Error::DegenerateAxis { row: r });
        }
    }
    Ok(())
}
