//! Tags raw sentences without any image: the text branch fuses pseudo
//! visual features generated from the text itself.
//!
//! `cargo run --release --example image_free_inference`

use bga_mner::data::{encode_all, parse_conll, Vocab};
use bga_mner::model::{fit, BgaModel, ModelConfig, TrainConfig};

const TRAIN: &str = "\
Alice\tB-PER
visited\tO
Paris\tB-LOC

Bob\tB-PER
works\tO
at\tO
Acme\tB-ORG
Corp\tI-ORG

the\tO
Acme\tB-ORG
office\tO
in\tO
Paris\tB-LOC
";

fn main() -> bga_mner::Result<()> {
    let examples = parse_conll(TRAIN)?;
    let vocab = Vocab::build(&examples);
    let mut config = ModelConfig {
        d: 16,
        layers: 1,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    config.bind_data(vocab.len(), &bga_mner::data::entity_types(&examples))?;
    let labels = config.labels()?;
    let train = encode_all(&examples, &vocab, &labels)?;

    let mut model = BgaModel::new(config, vocab)?;
    let cfg = TrainConfig {
        epochs: 60,
        batch_size: 1,
        lr: 1e-2,
        ..TrainConfig::default()
    };
    fit(&mut model, &train, &[], &cfg, 0, |_| {})?;

    for sentence in ["Alice works at Acme Corp", "Bob visited Paris"] {
        let tokens: Vec<&str> = sentence.split_whitespace().collect();
        let tags = model.infer_tokens(&tokens)?;
        let line: Vec<String> = tokens
            .iter()
            .zip(&tags)
            .map(|(w, t)| format!("{w}/{t}"))
            .collect();
        println!("{}", line.join(" "));
    }
    Ok(())
}
