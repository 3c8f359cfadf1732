//! Parameterized building blocks shared by the sampler, the generators and
//! the feature extractors.

mod attention;
mod embed;
mod layers;

pub use attention::{AttentionConfig, MultiHeadAttention};
pub use embed::{PatchProjector, TokenEmbeddingTable};
pub use layers::{DecoderBlock, EncoderLayer, LayerNorm, Linear, Mlp};

use rand::Rng as _;

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// One forward pass: the graph being recorded, the parameters it reads, and
/// the randomness available to it. A session without a generator runs in
/// evaluation mode (no dropout, deterministic sampling).
pub struct Session<'a> {
    pub graph: &'a mut Graph,
    pub store: &'a ParamStore,
    rng: Option<Rng>,
    dropout: f64,
}

impl<'a> Session<'a> {
    pub fn eval(graph: &'a mut Graph, store: &'a ParamStore) -> Self {
        Self {
            graph,
            store,
            rng: None,
            dropout: 0.0,
        }
    }

    pub fn train(graph: &'a mut Graph, store: &'a ParamStore, rng: Rng, dropout: f64) -> Self {
        Self {
            graph,
            store,
            rng: Some(rng),
            dropout,
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn rng(&mut self) -> Option<&mut Rng> {
        self.rng.as_mut()
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }

    /// Inverted dropout; the identity outside training or at rate 0.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let rate = self.dropout;
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let shape = self.graph.shape(x).to_vec();
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..shape.iter().product::<usize>())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let mask = self.graph.constant(Tensor::new(shape, mask)?)?;
        self.graph.mul(x, mask)
    }
}

impl Session<'_> {
    /// Hard Gumbel-Softmax sample of `logits` when training; `None` in
    /// evaluation mode.
    pub fn gumbel_hard(&mut self, logits: Var, temperature: f64) -> Result<Option<Var>> {
        match self.rng.as_mut() {
            Some(rng) => {
                crate::tensor::gumbel_softmax(self.graph, logits, temperature, rng, true).map(Some)
            }
            None => Ok(None),
        }
    }
}
