//! Hybrid-attention feature extraction and the layer that ties sampling,
//! generation and extraction together.

use crate::error::Result;
use crate::mcg::{forward_generation, BgaLayerOutput, GeneratorParams};
use crate::nn::{AttentionConfig, EncoderLayer, Session};
use crate::scs::{scs_forward, LayerMask, MaskVector, ScsParams};
use crate::tensor::{ParamStore, Rng, Var};

/// Per-layer parameters: a sampler and an extractor for each modality.
#[derive(Clone, Debug)]
pub struct BgaLayerParams {
    pub scs_t: ScsParams,
    pub scs_v: ScsParams,
    pub ext_t: EncoderLayer,
    pub ext_v: EncoderLayer,
}

impl BgaLayerParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cfg: AttentionConfig,
        ffn_width: usize,
    ) -> Self {
        Self {
            scs_t: ScsParams::new(store, rng, &format!("{name}.scs_t"), cfg.d),
            scs_v: ScsParams::new(store, rng, &format!("{name}.scs_v"), cfg.d),
            ext_t: EncoderLayer::new(store, rng, &format!("{name}.ext_t"), cfg, ffn_width),
            ext_v: EncoderLayer::new(store, rng, &format!("{name}.ext_v"), cfg, ffn_width),
        }
    }
}

/// Attention with queries from `primary` and keys/values from
/// `[primary ‖ generated_other]`, then the feed-forward sublayer. With no
/// generated rows this is exactly the plain encoder layer.
pub fn hybrid_extract(
    s: &mut Session<'_>,
    params: &EncoderLayer,
    primary: Var,
    generated_other: Option<Var>,
) -> Result<Var> {
    params.forward_hybrid(s, primary, generated_other)
}

/// Everything one layer hands to the next.
#[derive(Clone, Debug)]
pub struct LayerStep {
    pub text: Var,
    pub visual: Option<Var>,
    pub mask_t: LayerMask,
    pub mask_v: Option<LayerMask>,
    pub keep_probs_t: Var,
    pub keep_probs_v: Option<Var>,
    pub generation: BgaLayerOutput,
}

/// Inputs to one layer: current features and the previous layer's masks.
#[derive(Clone, Debug)]
pub struct LayerInput<'m> {
    pub text: Var,
    pub visual: Option<Var>,
    pub prev_t: &'m LayerMask,
    pub prev_v: Option<&'m LayerMask>,
    /// Positions allowed to be kept by the textual sampler.
    pub text_eligible: &'m MaskVector,
}

/// Sampling, generation and extraction for one layer. The visual branch
/// runs only when the pair has an image and visual features are supplied.
pub fn bga_layer(
    s: &mut Session<'_>,
    layer: &BgaLayerParams,
    generators: &GeneratorParams,
    input: LayerInput<'_>,
    has_image: bool,
    temperature: f64,
) -> Result<LayerStep> {
    let visual_active = has_image && input.visual.is_some() && input.prev_v.is_some();
    let scs_t = scs_forward(
        s,
        &layer.scs_t,
        input.text,
        input.prev_t,
        Some(input.text_eligible),
        temperature,
    )?;
    let scs_v = match (visual_active, input.visual, input.prev_v) {
        (true, Some(v), Some(prev)) => {
            Some(scs_forward(s, &layer.scs_v, v, prev, None, temperature)?)
        }
        _ => None,
    };
    let generation = forward_generation(
        s,
        generators,
        input.text,
        if visual_active { input.visual } else { None },
        &scs_t.mask,
        scs_v.as_ref().map(|o| &o.mask),
        visual_active,
    )?;
    let text = hybrid_extract(s, &layer.ext_t, input.text, Some(generation.v_hat))?;
    let visual = match (visual_active, input.visual) {
        (true, Some(v)) => Some(hybrid_extract(s, &layer.ext_v, v, generation.t_hat)?),
        _ => None,
    };
    Ok(LayerStep {
        text,
        visual,
        mask_t: scs_t.mask,
        keep_probs_t: scs_t.keep_probs,
        keep_probs_v: scs_v.as_ref().map(|o| o.keep_probs),
        mask_v: scs_v.map(|o| o.mask),
        generation,
    })
}
