//! Multi-level cross-modal generation: shared text→image and image→text
//! decoders driven by learnable modality queries, with reconstruction and
//! cycle-consistency losses in latent space.

use crate::error::{Error, Result};
use crate::nn::{AttentionConfig, DecoderBlock, Session};
use crate::scs::{LayerMask, MaskVector};
use crate::tensor::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// The two generators and their queries. One instance serves every layer.
#[derive(Clone, Debug)]
pub struct GeneratorParams {
    pub t2v: Vec<DecoderBlock>,
    pub v2t: Vec<DecoderBlock>,
    pub visual_query: ParamId,
    pub text_query: ParamId,
    pub num_patches: usize,
    pub max_text_len: usize,
}

impl GeneratorParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cfg: AttentionConfig,
        ffn_width: usize,
        depth: usize,
        num_patches: usize,
        max_text_len: usize,
    ) -> Self {
        let t2v = (0..depth)
            .map(|i| DecoderBlock::new(store, rng, &format!("{name}.t2v.{i}"), cfg, ffn_width))
            .collect();
        let v2t = (0..depth)
            .map(|i| DecoderBlock::new(store, rng, &format!("{name}.v2t.{i}"), cfg, ffn_width))
            .collect();
        Self {
            t2v,
            v2t,
            visual_query: store.add_normal(
                format!("{name}.visual_query"),
                &[num_patches, cfg.d],
                cfg.d,
                rng,
            ),
            text_query: store.add_normal(
                format!("{name}.text_query"),
                &[max_text_len, cfg.d],
                cfg.d,
                rng,
            ),
            num_patches,
            max_text_len,
        }
    }

    pub fn visual_queries(&self, s: &mut Session<'_>) -> Var {
        s.param(self.visual_query)
    }

    /// The first `n` textual query rows.
    pub fn text_queries(&self, s: &mut Session<'_>, n: usize) -> Result<Var> {
        if n > self.max_text_len {
            return Err(Error::Overlength {
                len: n,
                max: self.max_text_len,
            });
        }
        let q = s.param(self.text_query);
        s.graph.slice_rows(q, 0, n)
    }
}

/// Additive mask: 0 where the source position is kept, `-inf` where it is
/// dropped, repeated for every query row.
pub fn build_attention_mask(m: &MaskVector, n_queries: usize) -> Result<Tensor> {
    if !m.any() {
        return Err(Error::EmptyContent);
    }
    let row: Vec<f64> = m
        .bits()
        .iter()
        .map(|&b| if b { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    Tensor::matrix(n_queries, m.len(), row.repeat(n_queries))
}

/// Decodes `queries` against the kept rows of `source`.
pub fn generate(
    s: &mut Session<'_>,
    blocks: &[DecoderBlock],
    source: Var,
    queries: Var,
    m: &MaskVector,
) -> Result<Var> {
    let n_src = s.graph.shape(source)[0];
    if m.len() != n_src {
        return Err(Error::Shape {
            op: "generate",
            lhs: vec![n_src],
            rhs: vec![m.len()],
        });
    }
    let n_q = s.graph.shape(queries)[0];
    let mask = build_attention_mask(m, n_q)?;
    let mut x = queries;
    for block in blocks {
        x = block.forward(s, x, source, Some(&mask))?;
    }
    Ok(x)
}

/// `Σᵢ KL(softmax(aᵢ) ‖ softmax(bᵢ)) · mᵢ`, each row normalized over the
/// feature axis.
pub fn feature_kl(g: &mut Graph, a: Var, b: Var, m: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) || g.value(m).numel() != g.shape(a)[0] {
        return Err(Error::Shape {
            op: "feature_kl",
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        });
    }
    let p = g.softmax(a)?;
    let q = g.softmax(b)?;
    let kl = g.kl_rows(p, q)?;
    let weighted = g.mul(kl, m)?;
    g.sum(weighted)
}

fn add_opt(g: &mut Graph, a: Option<Var>, b: Option<Var>) -> Result<Option<Var>> {
    Ok(match (a, b) {
        (Some(a), Some(b)) => Some(g.add(a, b)?),
        (x, None) | (None, x) => x,
    })
}

/// Per-layer generation results. Loss fields are `None` when the term is
/// excluded, which counts as exactly zero.
#[derive(Clone, Debug)]
pub struct BgaLayerOutput {
    pub v_hat: Var,
    pub t_hat: Option<Var>,
    pub v_bar: Option<Var>,
    pub t_bar: Option<Var>,
    pub recon_loss: Option<Var>,
    pub cycle_loss: Option<Var>,
    pub mask_t: MaskVector,
    pub mask_v: Option<MaskVector>,
    /// The text→image direction fell back to attending over `[CLS]` only.
    pub text_degenerate: bool,
    /// The image→text direction was skipped for lack of kept patches.
    pub visual_degenerate: bool,
}

impl BgaLayerOutput {
    pub fn recon_value(&self, g: &Graph) -> f64 {
        self.recon_loss.map_or(0.0, |v| g.value(v).item())
    }

    pub fn cycle_value(&self, g: &Graph) -> f64 {
        self.cycle_loss.map_or(0.0, |v| g.value(v).item())
    }
}

/// Generation for one layer.
///
/// `V̂` is always produced since the text branch fuses it. With an image,
/// `T̂`, the cycle features and both losses follow; a direction whose source
/// mask is empty is skipped and contributes no loss.
pub fn forward_generation(
    s: &mut Session<'_>,
    params: &GeneratorParams,
    text: Var,
    visual: Option<Var>,
    m_t: &LayerMask,
    m_v: Option<&LayerMask>,
    has_image: bool,
) -> Result<BgaLayerOutput> {
    let n_t = s.graph.shape(text)[0];
    let text_ok = m_t.mask.any();
    let src_mask = if text_ok {
        m_t.mask.clone()
    } else {
        let mut bits = vec![false; n_t];
        bits[0] = true;
        MaskVector::new(bits)
    };
    let q_v = params.visual_queries(s);
    let v_hat = generate(s, &params.t2v, text, q_v, &src_mask)?;
    let mut out = BgaLayerOutput {
        v_hat,
        t_hat: None,
        v_bar: None,
        t_bar: None,
        recon_loss: None,
        cycle_loss: None,
        mask_t: m_t.mask.clone(),
        mask_v: m_v.map(|m| m.mask.clone()),
        text_degenerate: !text_ok,
        visual_degenerate: false,
    };
    if !has_image {
        return Ok(out);
    }
    let (visual, m_v) = match (visual, m_v) {
        (Some(v), Some(m)) => (v, m),
        _ => {
            return Err(Error::invalid(
                "image-bearing pair without visual features or mask",
            ))
        }
    };
    let n_v = s.graph.shape(visual)[0];
    if s.graph.shape(v_hat)[0] != n_v {
        return Err(Error::Shape {
            op: "forward_generation",
            lhs: s.graph.shape(v_hat).to_vec(),
            rhs: s.graph.shape(visual).to_vec(),
        });
    }
    let q_t = params.text_queries(s, n_t)?;
    let visual_ok = m_v.mask.any();
    out.visual_degenerate = !visual_ok;

    let ones_v = MaskVector::ones(n_v);
    let ones_t = MaskVector::ones(n_t);
    let mut recon = None;
    let mut cycle = None;
    if text_ok {
        let r = feature_kl(s.graph, v_hat, visual, m_v.var)?;
        recon = add_opt(s.graph, recon, Some(r))?;
        let t_bar = generate(s, &params.v2t, v_hat, q_t, &ones_v)?;
        let c = feature_kl(s.graph, t_bar, text, m_t.var)?;
        cycle = add_opt(s.graph, cycle, Some(c))?;
        out.t_bar = Some(t_bar);
    }
    if visual_ok {
        let t_hat = generate(s, &params.v2t, visual, q_t, &m_v.mask)?;
        let r = feature_kl(s.graph, t_hat, text, m_t.var)?;
        recon = add_opt(s.graph, recon, Some(r))?;
        let q_v = params.visual_queries(s);
        let v_bar = generate(s, &params.t2v, t_hat, q_v, &ones_t)?;
        let c = feature_kl(s.graph, v_bar, visual, m_v.var)?;
        cycle = add_opt(s.graph, cycle, Some(c))?;
        out.t_hat = Some(t_hat);
        out.v_bar = Some(v_bar);
    }
    out.recon_loss = recon;
    out.cycle_loss = cycle;
    Ok(out)
}
