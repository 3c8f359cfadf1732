//! Shows which tokens and patches each sampling layer keeps for one pair.
//!
//! `cargo run --release --example inspect_masks`

use bga_mner::data::{encode_all, generate_synthetic_corpus, SyntheticSchema, Vocab};
use bga_mner::model::{BgaModel, ModelConfig};

fn main() -> bga_mner::Result<()> {
    let schema = SyntheticSchema::default();
    let corpus = generate_synthetic_corpus(&schema, [50, 5, 5], 2)?;
    let vocab = Vocab::build(&corpus.train);
    let mut config = ModelConfig::default();
    config.bind_data(vocab.len(), &schema.types)?;
    let labels = config.labels()?;
    let examples = encode_all(&corpus.train, &vocab, &labels)?;
    let model = BgaModel::new(config, vocab)?;

    let (index, pair) = examples
        .iter()
        .enumerate()
        .find(|(_, e)| e.has_image)
        .expect("the corpus contains image-bearing pairs");
    let mut names = vec!["[CLS]".to_string()];
    names.extend(corpus.train[index].tokens.iter().cloned());
    names.push("[SEP]".to_string());

    for (layer, report) in model.inspect_masks(pair)?.iter().enumerate() {
        println!(
            "layer {layer}: {} of {} tokens kept",
            report.text.count(),
            report.text.len()
        );
        for ((name, keep), p) in names
            .iter()
            .zip(report.text.bits())
            .zip(&report.keep_probs_text)
        {
            println!("  {:<4} {p:.3} {name}", if *keep { "keep" } else { "drop" });
        }
        if let Some(visual) = &report.visual {
            println!("  patches: {} of {} kept", visual.count(), visual.len());
        }
    }
    Ok(())
}
