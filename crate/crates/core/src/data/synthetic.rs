//! Synthetic paired corpus with controlled entity/object ambiguity.
//!
//! Each entity type owns an archetype direction in raw patch space. A
//! fraction of surface forms is legal under two types; for those, the gold
//! type is drawn at random and only the paired image (which carries the
//! gold type's archetype) tells them apart.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Example;
use crate::crf::{bio_spans, span_counts, Prf};
use crate::error::{Error, Result};
use crate::tensor::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSchema {
    pub types: Vec<String>,
    /// Relative type frequencies; empty means uniform.
    pub type_weights: Vec<f64>,
    pub forms_per_type: usize,
    /// Fraction of surface forms legal under two types.
    pub ambiguity: f64,
    pub context_words: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub max_mentions: usize,
    pub raw_dim: usize,
    pub num_patches: usize,
    /// Standard deviation of per-coordinate patch noise.
    pub noise: f64,
    pub distractors: usize,
    /// Fraction of examples without an image.
    pub missing_image: f64,
}

impl Default for SyntheticSchema {
    fn default() -> Self {
        Self {
            types: ["PER", "LOC", "ORG", "MISC"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            type_weights: Vec::new(),
            forms_per_type: 12,
            ambiguity: 0.5,
            context_words: 60,
            min_words: 8,
            max_words: 16,
            max_mentions: 3,
            raw_dim: 16,
            num_patches: 8,
            noise: 0.1,
            distractors: 2,
            missing_image: 0.1,
        }
    }
}

/// A surface form and the types it may denote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormEntry {
    pub tokens: Vec<String>,
    pub types: Vec<usize>,
}

impl SyntheticSchema {
    pub fn validate(&self) -> Result<()> {
        let t = self.types.len();
        let bad = |m: &str| Err(Error::invalid(format!("synthetic schema: {m}")));
        if t == 0 {
            return bad("no entity types");
        }
        let mut sorted = self.types.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != t
            || self
                .types
                .iter()
                .any(|s| s.is_empty() || s.contains(char::is_whitespace))
        {
            return bad("entity types must be distinct non-empty words");
        }
        if !self.type_weights.is_empty()
            && (self.type_weights.len() != t
                || self
                    .type_weights
                    .iter()
                    .any(|&w| !(w > 0.0 && w.is_finite())))
        {
            return bad("type_weights must hold one positive weight per type");
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return bad("ambiguity must lie in [0, 1]");
        }
        if self.ambiguity > 0.0 && t < 2 {
            return bad("ambiguity needs at least two types");
        }
        if !(0.0..1.0).contains(&self.missing_image) {
            return bad("missing_image must lie in [0, 1)");
        }
        if self.forms_per_type == 0 || self.context_words == 0 || self.max_mentions == 0 {
            return bad("forms_per_type, context_words and max_mentions must be positive");
        }
        if self.min_words > self.max_words || self.min_words + 1 < 3 * self.max_mentions {
            return bad("min_words must fit max_mentions two-token mentions with gaps and not exceed max_words");
        }
        if self.raw_dim < t {
            return bad("raw_dim must be at least the number of types");
        }
        if self.num_patches < self.max_mentions + self.distractors {
            return bad("num_patches must hold one patch per mention plus the distractors");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be non-negative");
        }
        Ok(())
    }

    fn weights(&self) -> Vec<f64> {
        let w = if self.type_weights.is_empty() {
            vec![1.0; self.types.len()]
        } else {
            self.type_weights.clone()
        };
        let total: f64 = w.iter().sum();
        w.iter().map(|x| x / total).collect()
    }

    /// Number of ambiguous forms owned by each type.
    pub fn ambiguous_per_type(&self) -> usize {
        (self.ambiguity * self.forms_per_type as f64).round() as usize
    }

    /// The surface-form lexicon. The first ambiguous forms of each type are
    /// shared with one other type, assigned round-robin so every type
    /// borrows the same number of forms.
    pub fn lexicon(&self) -> Vec<FormEntry> {
        let t = self.types.len();
        let amb = self.ambiguous_per_type();
        let mut out = Vec::with_capacity(t * self.forms_per_type);
        for owner in 0..t {
            for k in 0..self.forms_per_type {
                let idx = owner * self.forms_per_type + k;
                let mut tokens = vec![format!("ent{idx}")];
                if k % 3 == 2 {
                    tokens.push(format!("ent{idx}b"));
                }
                let mut types = vec![owner];
                if k < amb {
                    types.push((owner + 1 + k % (t - 1)) % t);
                }
                out.push(FormEntry { tokens, types });
            }
        }
        out
    }

    /// `P(type | form)` for a text-only observer, per lexicon entry.
    pub fn posteriors(&self) -> Vec<Vec<(usize, f64)>> {
        let lex = self.lexicon();
        let w = self.weights();
        let mut legal = vec![0usize; self.types.len()];
        for f in &lex {
            for &t in &f.types {
                legal[t] += 1;
            }
        }
        lex.iter()
            .map(|f| {
                let scores: Vec<f64> = f.types.iter().map(|&t| w[t] / legal[t] as f64).collect();
                let z: f64 = scores.iter().sum();
                f.types
                    .iter()
                    .zip(&scores)
                    .map(|(&t, &s)| (t, s / z))
                    .collect()
            })
            .collect()
    }
}

/// Everything recorded alongside a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: SyntheticSchema,
    pub seed: u64,
    pub sizes: [usize; 3],
    pub archetypes: Vec<Vec<f64>>,
    pub lexicon: Vec<FormEntry>,
    /// Smallest, over image-bearing mentions, of the best cosine between a
    /// patch and the gold archetype.
    pub min_gold_cosine: f64,
    /// Text-only ceiling on the test split.
    pub test_ceiling: CeilingReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    pub manifest: Manifest,
}

fn gaussian(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn orthonormal_archetypes(rng: &mut Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        for u in &out {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.push(v.iter().map(|x| x / norm).collect());
        }
    }
    out
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

struct Sampler<'a> {
    schema: &'a SyntheticSchema,
    lexicon: Vec<FormEntry>,
    weights: Vec<f64>,
    /// Per type: all legal form indices, and the unambiguous ones.
    legal: Vec<Vec<usize>>,
    plain: Vec<Vec<usize>>,
    archetypes: Vec<Vec<f64>>,
}

impl Sampler<'_> {
    fn sample_type(&self, rng: &mut Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (t, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return t;
            }
        }
        self.weights.len() - 1
    }

    fn example(&self, rng: &mut Rng) -> Example {
        let s = self.schema;
        let has_image = rng.random::<f64>() >= s.missing_image;
        let n_words = rng.random_range(s.min_words..=s.max_words);
        let n_mentions = rng.random_range(1..=s.max_mentions);
        let mentions: Vec<(usize, usize)> = (0..n_mentions)
            .map(|_| {
                let t = self.sample_type(rng);
                let pool = if has_image {
                    &self.legal[t]
                } else {
                    &self.plain[t]
                };
                (t, pool[rng.random_range(0..pool.len())])
            })
            .collect();
        let mention_tokens: usize = mentions
            .iter()
            .map(|&(_, f)| self.lexicon[f].tokens.len())
            .sum();
        let context = n_words - mention_tokens;
        // Gap before each mention (inner gaps at least one word) and after the last.
        let mut gaps = vec![0usize; n_mentions + 1];
        for g in gaps.iter_mut().take(n_mentions).skip(1) {
            *g = 1;
        }
        for _ in 0..context - (n_mentions - 1) {
            gaps[rng.random_range(0..=n_mentions)] += 1;
        }
        let mut tokens = Vec::with_capacity(n_words);
        let mut tags = Vec::with_capacity(n_words);
        let context_word = |tokens: &mut Vec<String>, tags: &mut Vec<String>, rng: &mut Rng| {
            tokens.push(format!("c{}", rng.random_range(0..s.context_words)));
            tags.push("O".to_string());
        };
        for (i, &(t, f)) in mentions.iter().enumerate() {
            for _ in 0..gaps[i] {
                context_word(&mut tokens, &mut tags, rng);
            }
            for (j, tok) in self.lexicon[f].tokens.iter().enumerate() {
                tokens.push(tok.clone());
                tags.push(format!("{}-{}", if j == 0 { "B" } else { "I" }, s.types[t]));
            }
        }
        for _ in 0..gaps[n_mentions] {
            context_word(&mut tokens, &mut tags, rng);
        }
        let patches = has_image.then(|| self.image(rng, &mentions));
        Example {
            tokens,
            tags,
            patches,
            has_image,
        }
    }

    fn image(&self, rng: &mut Rng, mentions: &[(usize, usize)]) -> Vec<Vec<f64>> {
        let s = self.schema;
        let mut rows = Vec::with_capacity(s.num_patches);
        for &(t, _) in mentions {
            rows.push(
                self.archetypes[t]
                    .iter()
                    .map(|a| a + s.noise * gaussian(rng))
                    .collect(),
            );
        }
        for _ in 0..s.distractors {
            let v: Vec<f64> = (0..s.raw_dim).map(|_| gaussian(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            rows.push(v.iter().map(|x| x / norm).collect());
        }
        while rows.len() < s.num_patches {
            rows.push((0..s.raw_dim).map(|_| s.noise * gaussian(rng)).collect());
        }
        rows.shuffle(rng);
        rows
    }
}

fn min_gold_cosine(schema: &SyntheticSchema, archetypes: &[Vec<f64>], examples: &[Example]) -> f64 {
    let index: HashMap<&str, usize> = schema
        .types
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i))
        .collect();
    let mut worst = f64::INFINITY;
    for e in examples {
        let Some(patches) = &e.patches else { continue };
        for span in bio_spans(&e.tags).expect("generated tags are legal") {
            let a = &archetypes[index[span.kind.as_str()]];
            let best = patches
                .iter()
                .map(|p| cosine(p, a))
                .fold(f64::NEG_INFINITY, f64::max);
            worst = worst.min(best);
        }
    }
    worst
}

/// Generates train/dev/test splits. Deterministic in `seed`.
pub fn generate_synthetic_corpus(
    schema: &SyntheticSchema,
    sizes: [usize; 3],
    seed: u64,
) -> Result<Corpus> {
    schema.validate()?;
    if sizes.contains(&0) {
        return Err(Error::invalid("every split needs at least one example"));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let archetypes = orthonormal_archetypes(&mut rng, schema.types.len(), schema.raw_dim);
    let lexicon = schema.lexicon();
    let t = schema.types.len();
    let mut legal = vec![Vec::new(); t];
    let mut plain = vec![Vec::new(); t];
    for (i, f) in lexicon.iter().enumerate() {
        for &ty in &f.types {
            legal[ty].push(i);
        }
        if f.types.len() == 1 {
            plain[f.types[0]].push(i);
        }
    }
    if plain.iter().any(Vec::is_empty) {
        return Err(Error::invalid(
            "every type needs an unambiguous form for image-free examples",
        ));
    }
    let sampler = Sampler {
        schema,
        lexicon: lexicon.clone(),
        weights: schema.weights(),
        legal,
        plain,
        archetypes: archetypes.clone(),
    };
    let mut split =
        |n: usize| -> Vec<Example> { (0..n).map(|_| sampler.example(&mut rng)).collect() };
    let train = split(sizes[0]);
    let dev = split(sizes[1]);
    let test = split(sizes[2]);
    let min_cos = [&train, &dev, &test]
        .iter()
        .map(|s| min_gold_cosine(schema, &archetypes, s))
        .fold(f64::INFINITY, f64::min);
    let test_ceiling = ambiguity_ceiling(schema, &test)?;
    Ok(Corpus {
        train,
        dev,
        test,
        manifest: Manifest {
            schema: schema.clone(),
            seed,
            sizes,
            archetypes,
            lexicon,
            min_gold_cosine: min_cos,
            test_ceiling,
        },
    })
}

/// The best any image-blind tagger can do on a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CeilingReport {
    pub mentions: usize,
    pub ambiguous_mentions: usize,
    /// Expected micro-F1 of the Bayes-optimal text-only tagger with perfect
    /// boundaries: `1 − Σ (1 − max posterior) / mentions`.
    pub analytic_f1: f64,
    /// The same tagger's realized score on this split.
    pub oracle: Prf,
}

/// Scores the Bayes-optimal image-blind tagger: gold boundaries, and for
/// each mention the most probable type given its surface form (lowest type
/// index on ties).
pub fn ambiguity_ceiling(schema: &SyntheticSchema, examples: &[Example]) -> Result<CeilingReport> {
    let lex = schema.lexicon();
    let post = schema.posteriors();
    let by_form: HashMap<String, usize> = lex
        .iter()
        .enumerate()
        .map(|(i, f)| (f.tokens.join(" "), i))
        .collect();
    let mut mentions = 0;
    let mut ambiguous = 0;
    let mut expected_errors = 0.0;
    let mut predicted = Vec::with_capacity(examples.len());
    for e in examples {
        let mut tags = vec!["O".to_string(); e.tags.len()];
        for span in bio_spans(&e.tags)? {
            let form = e.tokens[span.start..=span.end].join(" ");
            let f = *by_form
                .get(&form)
                .ok_or_else(|| Error::invalid(format!("mention {form:?} is not in the lexicon")))?;
            let (best, p) =
                post[f]
                    .iter()
                    .copied()
                    .fold((usize::MAX, f64::NEG_INFINITY), |acc, (t, p)| {
                        if p > acc.1 || (p == acc.1 && t < acc.0) {
                            (t, p)
                        } else {
                            acc
                        }
                    });
            mentions += 1;
            if post[f].len() > 1 {
                ambiguous += 1;
            }
            expected_errors += 1.0 - p;
            for (k, tag) in tags
                .iter_mut()
                .enumerate()
                .take(span.end + 1)
                .skip(span.start)
            {
                *tag = format!(
                    "{}-{}",
                    if k == span.start { "B" } else { "I" },
                    schema.types[best]
                );
            }
        }
        predicted.push(tags);
    }
    let gold: Vec<Vec<String>> = examples.iter().map(|e| e.tags.clone()).collect();
    let oracle = span_counts(&predicted, &gold, None)?.prf();
    let analytic_f1 = if mentions == 0 {
        1.0
    } else {
        1.0 - expected_errors / mentions as f64
    };
    Ok(CeilingReport {
        mentions,
        ambiguous_mentions: ambiguous,
        analytic_f1,
        oracle,
    })
}

/// Mention share per type, for distribution checks.
pub fn type_proportions(schema: &SyntheticSchema, examples: &[Example]) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, usize> = schema.types.iter().map(|t| (t.clone(), 0)).collect();
    let mut total = 0usize;
    for e in examples {
        for s in bio_spans(&e.tags).expect("generated tags are legal") {
            *counts.entry(s.kind).or_default() += 1;
            total += 1;
        }
    }
    counts
        .into_iter()
        .map(|(k, c)| (k, c as f64 / total.max(1) as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crf::validate_bio;

    fn small() -> SyntheticSchema {
        SyntheticSchema::default()
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_synthetic_corpus(&small(), [30, 5, 5], 9).unwrap();
        let b = generate_synthetic_corpus(&small(), [30, 5, 5], 9).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_corpus(&small(), [30, 5, 5], 10).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn lexicon_has_requested_ambiguity_and_balanced_posteriors() {
        let s = small();
        let lex = s.lexicon();
        let amb = lex.iter().filter(|f| f.types.len() > 1).count();
        assert_eq!(amb as f64 / lex.len() as f64, 0.5);
        for p in s.posteriors() {
            if p.len() == 2 {
                assert_eq!(p[0].1, 0.5);
                assert_eq!(p[1].1, 0.5);
            } else {
                assert_eq!(p, vec![(p[0].0, 1.0)]);
            }
        }
    }

    #[test]
    fn examples_are_well_formed() {
        let s = small();
        let c = generate_synthetic_corpus(&s, [200, 10, 10], 1).unwrap();
        for e in c.train.iter().chain(&c.test) {
            e.validate().unwrap();
            validate_bio(&e.tags).unwrap();
            assert!((s.min_words..=s.max_words).contains(&e.tokens.len()));
            let n = bio_spans(&e.tags).unwrap().len();
            assert!((1..=s.max_mentions).contains(&n));
            if let Some(p) = &e.patches {
                assert_eq!(p.len(), s.num_patches);
                assert!(p.iter().all(|r| r.len() == s.raw_dim));
            }
        }
        for (i, a) in c.manifest.archetypes.iter().enumerate() {
            for b in &c.manifest.archetypes[i + 1..] {
                assert!(cosine(a, b).abs() <= 0.3);
            }
        }
        assert!(c.manifest.min_gold_cosine > 0.5);
    }

    #[test]
    fn image_free_examples_use_unambiguous_forms() {
        let s = SyntheticSchema {
            missing_image: 0.5,
            ..small()
        };
        let c = generate_synthetic_corpus(&s, [300, 1, 1], 2).unwrap();
        let report = ambiguity_ceiling(
            &s,
            &c.train
                .iter()
                .filter(|e| !e.has_image)
                .cloned()
                .collect::<Vec<_>>(),
        )
        .unwrap();
        assert!(report.mentions > 0);
        assert_eq!(report.ambiguous_mentions, 0);
        assert_eq!(report.analytic_f1, 1.0);
    }

    #[test]
    fn no_ambiguity_means_perfect_ceiling() {
        let s = SyntheticSchema {
            ambiguity: 0.0,
            ..small()
        };
        let c = generate_synthetic_corpus(&s, [5, 5, 100], 3).unwrap();
        assert_eq!(c.manifest.test_ceiling.analytic_f1, 1.0);
        assert_eq!(c.manifest.test_ceiling.oracle.f1, 1.0);
    }

    #[test]
    fn half_ambiguity_ceiling_matches_hand_formula() {
        let s = small();
        let c = generate_synthetic_corpus(&s, [1, 1, 500], 4).unwrap();
        let r = &c.manifest.test_ceiling;
        let expect = 1.0 - 0.5 * r.ambiguous_mentions as f64 / r.mentions as f64;
        assert!((r.analytic_f1 - expect).abs() < 1e-12);
        assert!(r.analytic_f1 < 0.9);
    }

    #[test]
    fn type_mix_tracks_weights() {
        let s = SyntheticSchema {
            type_weights: vec![4.0, 3.0, 2.0, 1.0],
            ..small()
        };
        let c = generate_synthetic_corpus(&s, [10_000, 1, 1], 5).unwrap();
        let props = type_proportions(&s, &c.train);
        for (name, w) in s.types.iter().zip([0.4, 0.3, 0.2, 0.1]) {
            assert!(
                (props[name] - w).abs() <= 0.05 * w,
                "{name}: {}",
                props[name]
            );
        }
    }

    #[test]
    fn invalid_schemas_are_rejected() {
        let bad = [
            SyntheticSchema {
                ambiguity: 1.5,
                ..small()
            },
            SyntheticSchema {
                missing_image: 1.0,
                ..small()
            },
            SyntheticSchema {
                types: vec![],
                ..small()
            },
            SyntheticSchema {
                num_patches: 2,
                ..small()
            },
            SyntheticSchema {
                min_words: 20,
                ..small()
            },
        ];
        for s in bad {
            assert!(generate_synthetic_corpus(&s, [1, 1, 1], 0).is_err());
        }
        assert!(generate_synthetic_corpus(&small(), [0, 1, 1], 0).is_err());
    }
}
