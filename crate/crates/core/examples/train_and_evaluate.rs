//! Trains the generative tagger on a small synthetic corpus, evaluates it
//! on the held-out split and saves a checkpoint.
//!
//! `cargo run --release --example train_and_evaluate`

use bga_mner::data::{encode_all, generate_synthetic_corpus, SyntheticSchema, Vocab};
use bga_mner::model::{checkpoint, evaluate, fit, BgaModel, ModelConfig, TrainConfig};

fn main() -> bga_mner::Result<()> {
    let schema = SyntheticSchema::default();
    let corpus = generate_synthetic_corpus(&schema, [600, 100, 100], 1)?;
    let vocab = Vocab::build(&corpus.train);

    let mut config = ModelConfig {
        d: 32,
        ..ModelConfig::default()
    };
    config.bind_data(vocab.len(), &schema.types)?;
    let labels = config.labels()?;
    let train = encode_all(&corpus.train, &vocab, &labels)?;
    let dev = encode_all(&corpus.dev, &vocab, &labels)?;
    let test = encode_all(&corpus.test, &vocab, &labels)?;

    let mut model = BgaModel::new(config, vocab)?;
    println!("{} parameters", model.num_params());
    let train_cfg = TrainConfig {
        epochs: 4,
        ..TrainConfig::default()
    };
    let outcome = fit(&mut model, &train, &dev, &train_cfg, 1, |r| {
        println!(
            "epoch {} loss {:.4} tagging {:.4} recon {:.4} cycle {:.4} dev F1 {:.3}",
            r.epoch,
            r.mean_loss,
            r.mean_mner,
            r.mean_recon,
            r.mean_cycle,
            r.dev.as_ref().map_or(0.0, |m| m.overall.f1)
        );
    })?;
    model.store = outcome.best_store;

    let metrics = evaluate(&model, &test)?;
    println!("test {}", serde_json::to_string(&metrics)?);

    let path = std::env::temp_dir().join("bga_example.ckpt");
    checkpoint::save(&model, &path)?;
    println!("checkpoint written to {}", path.display());
    Ok(())
}
