//! The head-to-head comparison on a synthetic corpus: the generative model
//! against its text-only counterpart, plus the retrieval-style alignment
//! score of the generated pseudo visual features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Variant};
use super::network::BgaModel;
use super::optim::TrainConfig;
use super::train::{evaluate, fit, EpochRecord, Metrics};
use crate::data::{
    encode_all, generate_synthetic_corpus, CeilingReport, PairedExample, SyntheticSchema, Vocab,
};
use crate::error::{Error, Result};
use crate::tensor::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub pairs: usize,
    /// Pairs whose own image scored strictly above every mismatched one.
    pub wins: usize,
    pub accuracy: f64,
}

/// For every image-bearing example, ranks its own image against `k` images
/// drawn from other examples of the same split.
pub fn alignment_accuracy(
    model: &BgaModel,
    examples: &[PairedExample],
    k: usize,
    seed: u64,
) -> Result<AlignmentReport> {
    let with_image: Vec<usize> = (0..examples.len())
        .filter(|&i| examples[i].has_image)
        .collect();
    if k == 0 || with_image.len() <= k {
        return Err(Error::invalid(format!(
            "need more than {k} image-bearing examples, have {}",
            with_image.len()
        )));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let mut wins = 0;
    for &i in &with_image {
        let mut others: Vec<usize> = with_image.iter().copied().filter(|&j| j != i).collect();
        others.shuffle(&mut rng);
        let mut candidates = vec![examples[i].patches.clone().expect("filtered")];
        candidates.extend(
            others[..k]
                .iter()
                .map(|&j| examples[j].patches.clone().expect("filtered")),
        );
        let sims = model.alignment_similarity(&examples[i].ids, &candidates)?;
        if sims[1..].iter().all(|&s| sims[0] > s) {
            wins += 1;
        }
    }
    Ok(AlignmentReport {
        pairs: with_image.len(),
        wins,
        accuracy: wins as f64 / with_image.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant: Variant,
    pub alpha: f64,
    pub best_epoch: usize,
    pub epochs: Vec<EpochRecord>,
    pub test: Metrics,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub ceiling: CeilingReport,
    pub bga: VariantRun,
    pub text_only: VariantRun,
    pub alignment: AlignmentReport,
}

impl ComparisonReport {
    /// Test micro-F1 of the generative model minus the baseline's.
    pub fn gap(&self) -> f64 {
        self.bga.test.overall.f1 - self.text_only.test.overall.f1
    }
}

/// Generates a corpus, trains both variants from the same initialization
/// seed (the baseline with `alpha = 0`), restores each run's best dev
/// epoch, and scores both on the test split.
pub fn run_comparison(
    schema: &SyntheticSchema,
    sizes: [usize; 3],
    seed: u64,
    model: &ModelConfig,
    train: &TrainConfig,
    mut on_epoch: impl FnMut(Variant, &EpochRecord),
) -> Result<(ComparisonReport, BgaModel)> {
    let corpus = generate_synthetic_corpus(schema, sizes, seed)?;
    let vocab = Vocab::build(&corpus.train);
    let mut base = model.clone();
    base.bind_data(vocab.len(), &schema.types)?;
    let labels = base.labels()?;
    let train_set = encode_all(&corpus.train, &vocab, &labels)?;
    let dev = encode_all(&corpus.dev, &vocab, &labels)?;
    let test = encode_all(&corpus.test, &vocab, &labels)?;

    let mut runs = Vec::with_capacity(2);
    let mut trained = None;
    for variant in [Variant::Bga, Variant::TextOnly] {
        let mut cfg = base.clone();
        cfg.variant = variant;
        if variant == Variant::TextOnly {
            cfg.alpha = 0.0;
        }
        let alpha = cfg.alpha;
        let start = std::time::Instant::now();
        let mut m = BgaModel::new(cfg, vocab.clone())?;
        let outcome = fit(&mut m, &train_set, &dev, train, seed, |r| {
            on_epoch(variant, r)
        })?;
        m.store = outcome.best_store;
        runs.push(VariantRun {
            variant,
            alpha,
            best_epoch: outcome.best_epoch,
            epochs: outcome.epochs,
            test: evaluate(&m, &test)?,
            seconds: start.elapsed().as_secs_f64(),
        });
        if variant == Variant::Bga {
            trained = Some(m);
        }
    }
    let bga_model = trained.expect("generative run");
    let alignment = alignment_accuracy(&bga_model, &test, 3, seed)?;
    let text_only = runs.pop().expect("two runs");
    let bga = runs.pop().expect("two runs");
    Ok((
        ComparisonReport {
            ceiling: corpus.manifest.test_ceiling,
            bga,
            text_only,
            alignment,
        },
        bga_model,
    ))
}
