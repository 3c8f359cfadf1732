use super::{Linear, Session};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Rng, Var};

/// Learned token and position embeddings with reserved special ids.
#[derive(Clone, Debug)]
pub struct TokenEmbeddingTable {
    pub embedding: ParamId,
    pub position: ParamId,
    pub vocab_size: usize,
    pub max_len: usize,
    pub cls: usize,
    pub sep: usize,
    pub pad: usize,
}

impl TokenEmbeddingTable {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        vocab_size: usize,
        max_len: usize,
        d: usize,
        specials: (usize, usize, usize),
    ) -> Result<Self> {
        let (cls, sep, pad) = specials;
        if cls == sep
            || cls == pad
            || sep == pad
            || [cls, sep, pad].iter().any(|&i| i >= vocab_size)
        {
            return Err(Error::invalid(
                "special token ids must be distinct and inside the vocabulary",
            ));
        }
        if max_len < 2 {
            return Err(Error::invalid(
                "max_len must leave room for [CLS] and [SEP]",
            ));
        }
        Ok(Self {
            embedding: store.add_normal(format!("{name}.embedding"), &[vocab_size, d], d, rng),
            position: store.add_normal(format!("{name}.position"), &[max_len, d], d, rng),
            vocab_size,
            max_len,
            cls,
            sep,
            pad,
        })
    }

    /// `[CLS] ids… [SEP]` looked up and summed with positions `0..len+2`.
    pub fn embed_tokens(&self, s: &mut Session<'_>, ids: &[usize]) -> Result<Var> {
        if ids.len() + 2 > self.max_len {
            return Err(Error::Overlength {
                len: ids.len(),
                max: self.max_len - 2,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::UnknownId {
                id: bad,
                vocab: self.vocab_size,
            });
        }
        let mut full = Vec::with_capacity(ids.len() + 2);
        full.push(self.cls);
        full.extend_from_slice(ids);
        full.push(self.sep);
        let table = s.param(self.embedding);
        let tok = s.graph.gather_rows(table, &full)?;
        let pos_table = s.param(self.position);
        let pos = s.graph.slice_rows(pos_table, 0, full.len())?;
        s.graph.add(tok, pos)
    }
}

/// Projects raw patch features to the model width and adds patch positions.
#[derive(Clone, Debug)]
pub struct PatchProjector {
    pub projection: Linear,
    pub position: ParamId,
    pub num_patches: usize,
}

impl PatchProjector {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        raw_dim: usize,
        num_patches: usize,
        d: usize,
    ) -> Self {
        Self {
            projection: Linear::new(store, rng, &format!("{name}.proj"), raw_dim, d),
            position: store.add_normal(format!("{name}.position"), &[num_patches, d], d, rng),
            num_patches,
        }
    }

    pub fn embed_patches(&self, s: &mut Session<'_>, raw: Var) -> Result<Var> {
        let shape = s.graph.shape(raw).to_vec();
        if shape.len() != 2
            || shape[1] != self.projection.d_in
            || shape[0] > self.num_patches
            || shape[0] == 0
        {
            return Err(Error::Shape {
                op: "embed_patches",
                lhs: shape,
                rhs: vec![self.num_patches, self.projection.d_in],
            });
        }
        let x = self.projection.forward(s, raw)?;
        let pos_table = s.param(self.position);
        let pos = s.graph.slice_rows(pos_table, 0, shape[0])?;
        s.graph.add(x, pos)
    }
}
