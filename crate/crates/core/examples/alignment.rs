//! Scores how well the pseudo visual features generated from a sentence
//! pick out its own image among mismatched ones.
//!
//! `cargo run --release --example alignment`

use bga_mner::data::{encode_all, generate_synthetic_corpus, SyntheticSchema, Vocab};
use bga_mner::model::{alignment_accuracy, fit, BgaModel, ModelConfig, TrainConfig};

fn main() -> bga_mner::Result<()> {
    let schema = SyntheticSchema::default();
    let corpus = generate_synthetic_corpus(&schema, [400, 50, 100], 4)?;
    let vocab = Vocab::build(&corpus.train);
    let mut config = ModelConfig {
        d: 32,
        ..ModelConfig::default()
    };
    config.bind_data(vocab.len(), &schema.types)?;
    let labels = config.labels()?;
    let train = encode_all(&corpus.train, &vocab, &labels)?;
    let test = encode_all(&corpus.test, &vocab, &labels)?;

    let mut model = BgaModel::new(config, vocab)?;
    let before = alignment_accuracy(&model, &test, 3, 0)?;
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    fit(&mut model, &train, &[], &cfg, 4, |_| {})?;
    let after = alignment_accuracy(&model, &test, 3, 0)?;

    let pair = test
        .iter()
        .find(|e| e.has_image)
        .expect("image-bearing pair");
    let other = test
        .iter()
        .rev()
        .find(|e| e.has_image)
        .expect("image-bearing pair");
    let sims = model.alignment_similarity(
        &pair.ids,
        &[
            pair.patches.clone().unwrap(),
            other.patches.clone().unwrap(),
        ],
    )?;
    println!(
        "paired cosine {:.4}, mismatched cosine {:.4}",
        sims[0], sims[1]
    );
    println!(
        "paired image ranked first: {:.3} before training, {:.3} after (chance 0.25)",
        before.accuracy, after.accuracy
    );
    Ok(())
}
