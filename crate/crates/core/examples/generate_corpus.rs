//! Generates a small synthetic paired corpus, writes it as JSON lines and
//! reports how well an image-blind tagger could possibly do on it.
//!
//! `cargo run --release --example generate_corpus -- [out_dir]`

use bga_mner::data::{generate_synthetic_corpus, type_proportions, write_jsonl, SyntheticSchema};

fn main() -> bga_mner::Result<()> {
    let out = std::env::args().nth(1).map(std::path::PathBuf::from);
    let schema = SyntheticSchema::default();
    let corpus = generate_synthetic_corpus(&schema, [400, 50, 200], 7)?;

    let sample = &corpus.train[0];
    for (tok, tag) in sample.tokens.iter().zip(&sample.tags) {
        println!("{tok:>12} {tag}");
    }
    println!("image attached: {}", sample.has_image);

    let ceiling = &corpus.manifest.test_ceiling;
    println!(
        "test split: {} mentions, {} ambiguous, image-blind ceiling F1 {:.3} (realized {:.3})",
        ceiling.mentions, ceiling.ambiguous_mentions, ceiling.analytic_f1, ceiling.oracle.f1
    );
    for (kind, share) in type_proportions(&schema, &corpus.train) {
        println!("{kind:>5} {:.1}% of training mentions", 100.0 * share);
    }

    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        write_jsonl(dir.join("train.jsonl"), &corpus.train)?;
        write_jsonl(dir.join("dev.jsonl"), &corpus.dev)?;
        write_jsonl(dir.join("test.jsonl"), &corpus.test)?;
        println!("wrote splits to {}", dir.display());
    }
    Ok(())
}
