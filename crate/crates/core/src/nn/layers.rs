use super::{AttentionConfig, MultiHeadAttention, Session};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Rng, Tensor, Var};

/// Affine map `x·W + b` with `W: d_in×d_out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        Self::with_bias(store, rng, name, d_in, d_out, true)
    }

    pub fn with_bias(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), &[d_in, d_out], d_in, rng);
        let bias = bias.then(|| store.add_zeros(format!("{name}.bias"), &[d_out]));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let y = s.graph.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                s.graph.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add_full(format!("{name}.gamma"), &[d], 1.0),
            beta: store.add_zeros(format!("{name}.beta"), &[d]),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        s.graph.layer_norm(x, g, b)
    }
}

/// Two-layer perceptron with a GELU between the layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d_in, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, d_out),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        let h = s.graph.gelu(h)?;
        self.fc2.forward(s, h)
    }
}

fn check_width(s: &Session<'_>, x: Var, d: usize, op: &'static str) -> Result<()> {
    let shape = s.graph.shape(x);
    if shape.len() != 2 || shape[1] != d {
        return Err(Error::Shape {
            op,
            lhs: shape.to_vec(),
            rhs: vec![d],
        });
    }
    Ok(())
}

/// Post-norm transformer layer: attention then feed-forward, each followed
/// by a residual add and layer normalization.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ffn: Mlp,
    pub ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cfg: AttentionConfig,
        ffn_width: usize,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), cfg),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.d),
            ffn: Mlp::new(store, rng, &format!("{name}.ffn"), cfg.d, ffn_width, cfg.d),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.d),
        }
    }

    pub fn d(&self) -> usize {
        self.attn.cfg.d
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        self.forward_hybrid(s, x, None)
    }

    /// Queries come from `x`; keys and values from `x` stacked over `extra`.
    pub fn forward_hybrid(&self, s: &mut Session<'_>, x: Var, extra: Option<Var>) -> Result<Var> {
        check_width(s, x, self.d(), "encoder_layer")?;
        let kv = match extra {
            Some(e) => {
                check_width(s, e, self.d(), "encoder_layer")?;
                s.graph.concat_rows(&[x, e])?
            }
            None => x,
        };
        let a = self.attn.forward(s, x, kv, None)?;
        let a = s.dropout(a)?;
        let h = s.graph.add(x, a)?;
        let h = self.ln1.forward(s, h)?;
        let f = self.ffn.forward(s, h)?;
        let f = s.dropout(f)?;
        let out = s.graph.add(h, f)?;
        self.ln2.forward(s, out)
    }
}

/// Query-side transformer decoder block: self-attention over the queries,
/// masked cross-attention into the memory, then feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
    pub ln3: LayerNorm,
}

impl DecoderBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cfg: AttentionConfig,
        ffn_width: usize,
    ) -> Self {
        Self {
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self_attn"), cfg),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.d),
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross_attn"), cfg),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.d),
            ffn: Mlp::new(store, rng, &format!("{name}.ffn"), cfg.d, ffn_width, cfg.d),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), cfg.d),
        }
    }

    pub fn forward(
        &self,
        s: &mut Session<'_>,
        queries: Var,
        memory: Var,
        memory_mask: Option<&Tensor>,
    ) -> Result<Var> {
        let d = self.self_attn.cfg.d;
        check_width(s, queries, d, "decoder_block")?;
        check_width(s, memory, d, "decoder_block")?;
        let a = self.self_attn.forward(s, queries, queries, None)?;
        let a = s.dropout(a)?;
        let h = s.graph.add(queries, a)?;
        let h = self.ln1.forward(s, h)?;
        let c = self.cross_attn.forward(s, h, memory, memory_mask)?;
        let c = s.dropout(c)?;
        let h2 = s.graph.add(h, c)?;
        let h2 = self.ln2.forward(s, h2)?;
        let f = self.ffn.forward(s, h2)?;
        let f = s.dropout(f)?;
        let out = s.graph.add(h2, f)?;
        self.ln3.forward(s, out)
    }
}
