use rand::SeedableRng;

use super::config::{ModelConfig, Variant};
use crate::crf::{self, CrfParams, LabelSet};
use crate::data::{PairedExample, Vocab};
use crate::error::{Error, Result};
use crate::extractor::{bga_layer, BgaLayerParams, LayerInput, LayerStep};
use crate::mcg::GeneratorParams;
use crate::nn::{EncoderLayer, Linear, PatchProjector, Session, TokenEmbeddingTable};
use crate::scs::{LayerMask, MaskVector};
use crate::tensor::{Graph, ParamStore, Rng, Tensor, Var};

/// The full tagger: embeddings, one plain encoder layer per modality, the
/// generation layers, a shared generator pair, and a CRF head.
#[derive(Clone, Debug)]
pub struct BgaModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub labels: LabelSet,
    pub store: ParamStore,
    pub text_embed: TokenEmbeddingTable,
    pub patch_embed: PatchProjector,
    pub plain_t: EncoderLayer,
    pub plain_v: EncoderLayer,
    pub layers: Vec<BgaLayerParams>,
    pub generators: GeneratorParams,
    pub emission: Linear,
    pub crf: CrfParams,
}

/// One sentence's pass through the network.
#[derive(Clone, Debug)]
pub struct SentenceTrace {
    /// `n×L` scores over word positions.
    pub emissions: Var,
    /// Output of the plain visual layer, when an image was supplied.
    pub plain_visual: Option<Var>,
    pub text_features: Var,
    /// Per generation layer; empty for the text-only variant.
    pub steps: Vec<LayerStep>,
}

/// Losses of one batch, recorded on the session's graph.
#[derive(Clone, Debug)]
pub struct BatchForward {
    pub traces: Vec<SentenceTrace>,
    /// Mean CRF negative log-likelihood.
    pub mner: Var,
    /// Per layer, averaged over image-bearing examples; `None` is exactly 0.
    pub recon: Vec<Option<Var>>,
    pub cycle: Vec<Option<Var>>,
    pub loss: Var,
}

impl BatchForward {
    pub fn values(&self, g: &Graph) -> (f64, Vec<f64>, Vec<f64>) {
        let v = |x: &Option<Var>| x.map_or(0.0, |x| g.value(x).item());
        (
            g.value(self.mner).item(),
            self.recon.iter().map(v).collect(),
            self.cycle.iter().map(v).collect(),
        )
    }
}

/// `α · (1/N) · Σₗ (reconₗ + cycleₗ)`.
pub fn generation_term(recon: &[f64], cycle: &[f64], alpha: f64, n: usize) -> Result<f64> {
    if recon.len() != n || cycle.len() != n || n == 0 {
        return Err(Error::Shape {
            op: "overall_loss",
            lhs: vec![recon.len(), cycle.len()],
            rhs: vec![n],
        });
    }
    let total: f64 = recon.iter().zip(cycle).map(|(r, c)| r + c).sum();
    Ok(alpha * (total / n as f64))
}

/// `l_mner + α · (1/N) · Σₗ (reconₗ + cycleₗ)`.
pub fn overall_loss(
    l_mner: f64,
    recon: &[f64],
    cycle: &[f64],
    alpha: f64,
    n: usize,
) -> Result<f64> {
    let gen = generation_term(recon, cycle, alpha, n)?;
    Ok(if alpha == 0.0 { l_mner } else { l_mner + gen })
}

fn sum_opt(g: &mut Graph, terms: &[Option<Var>]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &t in terms.iter().flatten() {
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    Ok(acc)
}

impl BgaModel {
    /// Builds a model with parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Mismatch(format!(
                "vocabulary has {} tokens, config says {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let labels = config.labels()?;
        let mut rng = Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let att = config.attention();
        let ffn = config.ffn_width();
        let d = config.d;
        let text_embed = TokenEmbeddingTable::new(
            &mut store,
            &mut rng,
            "embed.text",
            config.vocab_size,
            config.max_positions(),
            d,
            (vocab.cls(), vocab.sep(), vocab.pad()),
        )?;
        let patch_embed = PatchProjector::new(
            &mut store,
            &mut rng,
            "embed.patch",
            config.raw_dim,
            config.num_patches,
            d,
        );
        let plain_t = EncoderLayer::new(&mut store, &mut rng, "plain.text", att, ffn);
        let plain_v = EncoderLayer::new(&mut store, &mut rng, "plain.visual", att, ffn);
        let layers = (0..config.layers)
            .map(|l| BgaLayerParams::new(&mut store, &mut rng, &format!("layer{l}"), att, ffn))
            .collect();
        let generators = GeneratorParams::new(
            &mut store,
            &mut rng,
            "generator",
            att,
            ffn,
            config.generator_depth,
            config.num_patches,
            config.max_positions(),
        );
        let emission = Linear::new(&mut store, &mut rng, "emission", d, labels.len());
        let crf = CrfParams::new(&mut store, "crf", labels.len());
        Ok(Self {
            config,
            vocab,
            labels,
            store,
            text_embed,
            patch_embed,
            plain_t,
            plain_v,
            layers,
            generators,
            emission,
            crf,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }

    /// Parameters of the shared generator pair and its queries.
    pub fn generator_params(&self) -> usize {
        self.store.numel_with_prefix("generator.")
    }

    /// Runs one sentence. With `patches`, the visual branch is active and
    /// generation losses are recorded; without, only the text branch and
    /// text→image generation run.
    pub fn run_sentence(
        &self,
        s: &mut Session<'_>,
        ids: &[usize],
        patches: Option<&Tensor>,
    ) -> Result<SentenceTrace> {
        if ids.is_empty() {
            return Err(Error::Empty("sentence"));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::Overlength {
                len: ids.len(),
                max: self.config.max_len,
            });
        }
        let emb = self.text_embed.embed_tokens(s, ids)?;
        let mut text = self.plain_t.forward(s, emb)?;
        let plain_visual = match patches {
            Some(p) => {
                let raw = s.graph.constant(p.clone())?;
                let v = self.patch_embed.embed_patches(s, raw)?;
                Some(self.plain_v.forward(s, v)?)
            }
            None => None,
        };
        let mut steps = Vec::new();
        match self.config.variant {
            Variant::TextOnly => {
                for layer in &self.layers {
                    text = layer.ext_t.forward(s, text)?;
                }
            }
            Variant::Bga => {
                let n = ids.len() + 2;
                let mut eligible = vec![true; n];
                eligible[0] = false;
                eligible[n - 1] = false;
                let eligible = MaskVector::new(eligible);
                let mut prev_t = LayerMask::constant(s.graph, MaskVector::ones(n))?;
                let mut prev_v = match plain_visual {
                    Some(v) => {
                        let rows = s.graph.shape(v)[0];
                        Some(LayerMask::constant(s.graph, MaskVector::ones(rows))?)
                    }
                    None => None,
                };
                let mut visual = plain_visual;
                for layer in &self.layers {
                    let step = bga_layer(
                        s,
                        layer,
                        &self.generators,
                        LayerInput {
                            text,
                            visual,
                            prev_t: &prev_t,
                            prev_v: prev_v.as_ref(),
                            text_eligible: &eligible,
                        },
                        patches.is_some(),
                        self.config.temperature,
                    )?;
                    text = step.text;
                    visual = step.visual;
                    prev_t = step.mask_t.clone();
                    prev_v = step.mask_v.clone();
                    steps.push(step);
                }
            }
        }
        let words = s.graph.slice_rows(text, 1, ids.len())?;
        let emissions = self.emission.forward(s, words)?;
        Ok(SentenceTrace {
            emissions,
            plain_visual,
            text_features: text,
            steps,
        })
    }

    /// Batch forward pass with the overall training objective.
    pub fn forward_batch(
        &self,
        s: &mut Session<'_>,
        batch: &[&PairedExample],
    ) -> Result<BatchForward> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let n_layers = self.config.layers;
        let mut traces = Vec::with_capacity(batch.len());
        let mut nlls = Vec::with_capacity(batch.len());
        let mut recon_terms: Vec<Vec<Option<Var>>> = vec![Vec::new(); n_layers];
        let mut cycle_terms: Vec<Vec<Option<Var>>> = vec![Vec::new(); n_layers];
        let mut with_image = 0usize;
        for ex in batch {
            if ex.tags.len() != ex.ids.len() {
                return Err(Error::Mismatch(format!(
                    "{} tokens but {} tags",
                    ex.ids.len(),
                    ex.tags.len()
                )));
            }
            let patches = if ex.has_image {
                Some(
                    ex.patches
                        .as_ref()
                        .ok_or_else(|| Error::invalid("has_image set without patches"))?,
                )
            } else {
                None
            };
            let trace = self.run_sentence(s, &ex.ids, patches)?;
            let (t, st) = (s.param(self.crf.transitions), s.param(self.crf.start));
            nlls.push(crf::nll_op(s.graph, trace.emissions, t, st, &ex.tags)?);
            if ex.has_image {
                with_image += 1;
                for (l, step) in trace.steps.iter().enumerate() {
                    recon_terms[l].push(step.generation.recon_loss);
                    cycle_terms[l].push(step.generation.cycle_loss);
                }
            }
            traces.push(trace);
        }
        let g = &mut *s.graph;
        let total =
            sum_opt(g, &nlls.into_iter().map(Some).collect::<Vec<_>>())?.expect("non-empty batch");
        let mner = g.scale(total, 1.0 / batch.len() as f64)?;
        let mut layer_mean = |terms: &[Option<Var>]| -> Result<Option<Var>> {
            match sum_opt(g, terms)? {
                Some(v) => Ok(Some(g.scale(v, 1.0 / with_image as f64)?)),
                None => Ok(None),
            }
        };
        let recon: Vec<Option<Var>> = recon_terms
            .iter()
            .map(|t| layer_mean(t))
            .collect::<Result<_>>()?;
        let cycle: Vec<Option<Var>> = cycle_terms
            .iter()
            .map(|t| layer_mean(t))
            .collect::<Result<_>>()?;
        let alpha = self.config.alpha;
        let mut loss = mner;
        if alpha != 0.0 {
            let all: Vec<Option<Var>> = recon.iter().chain(&cycle).copied().collect();
            if let Some(gen) = sum_opt(g, &all)? {
                let gen = g.scale(gen, 1.0 / n_layers as f64)?;
                let gen = g.scale(gen, alpha)?;
                loss = g.add(mner, gen)?;
            }
        }
        Ok(BatchForward {
            traces,
            mner,
            recon,
            cycle,
            loss,
        })
    }

    /// Image-free tagging: text branch plus text→image generation, sampling
    /// in evaluation mode, then Viterbi decoding.
    pub fn infer(&self, ids: &[usize]) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let mut s = Session::eval(&mut g, &self.store);
        let trace = self.run_sentence(&mut s, ids, None)?;
        let em = g.value(trace.emissions).clone();
        Ok(crf::viterbi_decode(&em, &self.crf.weights(&self.store))?.0)
    }

    /// Tags a whitespace-tokenized sentence by label name.
    pub fn infer_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<String>> {
        let ids = self.vocab.encode(tokens);
        Ok(self.labels.decode(&self.infer(&ids)?))
    }

    /// Cosine similarity between the mean generated pseudo visual feature of
    /// the last layer and the mean plain-layer encoding of each candidate
    /// patch set, in candidate order.
    pub fn alignment_similarity(&self, ids: &[usize], candidates: &[Tensor]) -> Result<Vec<f64>> {
        if candidates.is_empty() {
            return Err(Error::Empty("candidate set"));
        }
        if candidates.len() < 2 {
            return Err(Error::invalid("alignment needs at least two candidates"));
        }
        let mut g = Graph::new();
        let mut s = Session::eval(&mut g, &self.store);
        let pseudo = match self.config.variant {
            Variant::Bga => {
                let trace = self.run_sentence(&mut s, ids, None)?;
                let v_hat = trace
                    .steps
                    .last()
                    .expect("at least one layer")
                    .generation
                    .v_hat;
                s.graph.mean_rows(v_hat)?
            }
            Variant::TextOnly => {
                // No generation path exists; fall back to the pooled text.
                let trace = self.run_sentence(&mut s, ids, None)?;
                s.graph.mean_rows(trace.text_features)?
            }
        };
        let mut pooled = Vec::with_capacity(candidates.len());
        for c in candidates {
            let raw = s.graph.constant(c.clone())?;
            let v = self.patch_embed.embed_patches(&mut s, raw)?;
            let v = self.plain_v.forward(&mut s, v)?;
            pooled.push(s.graph.mean_rows(v)?);
        }
        let p = s.graph.value(pseudo).data().to_vec();
        Ok(pooled
            .iter()
            .map(|&c| cosine(&p, s.graph.value(c).data()))
            .collect())
    }

    /// Per-layer masks and keep probabilities for a pair, sampled in
    /// evaluation mode with the visual branch active when an image exists.
    pub fn inspect_masks(&self, ex: &PairedExample) -> Result<Vec<MaskReport>> {
        let mut g = Graph::new();
        let mut s = Session::eval(&mut g, &self.store);
        let patches = if ex.has_image {
            ex.patches.as_ref()
        } else {
            None
        };
        let trace = self.run_sentence(&mut s, &ex.ids, patches)?;
        Ok(trace
            .steps
            .iter()
            .map(|st| MaskReport {
                text: st.mask_t.mask.clone(),
                visual: st.mask_v.as_ref().map(|m| m.mask.clone()),
                keep_probs_text: g.value(st.keep_probs_t).data().to_vec(),
                keep_probs_visual: st.keep_probs_v.map(|v| g.value(v).data().to_vec()),
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskReport {
    /// Over `[CLS] words… [SEP]`.
    pub text: MaskVector,
    pub visual: Option<MaskVector>,
    pub keep_probs_text: Vec<f64>,
    pub keep_probs_visual: Option<Vec<f64>>,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}
