//! Trains the generative tagger and its text-only counterpart on the same
//! synthetic corpus and prints the comparison as JSON.
//!
//! `cargo run --release --example compare_variants -- [train] [dev] [test] [epochs]`
//!
//! Defaults to a 1000/200/200 corpus and 4 epochs. `4000 500 500 8` is the
//! full-size run (several minutes on one core).

use bga_mner::data::SyntheticSchema;
use bga_mner::model::{run_comparison, ModelConfig, TrainConfig};

fn main() -> bga_mner::Result<()> {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .map(|a| {
            a.parse()
                .map_err(|_| bga_mner::Error::invalid(format!("not a count: {a}")))
        })
        .collect::<bga_mner::Result<_>>()?;
    let arg = |i: usize, default: usize| args.get(i).copied().unwrap_or(default);
    let sizes = [arg(0, 1000), arg(1, 200), arg(2, 200)];
    let train = TrainConfig {
        epochs: arg(3, 4),
        ..TrainConfig::default()
    };
    let (report, _) = run_comparison(
        &SyntheticSchema::default(),
        sizes,
        7,
        &ModelConfig::default(),
        &train,
        |variant, r| eprintln!("{variant:?} epoch {} loss {:.4}", r.epoch, r.mean_loss),
    )?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    println!(
        "gap {:+.2} F1 points; image-blind ceiling {:.3}",
        100.0 * report.gap(),
        report.ceiling.analytic_f1
    );
    Ok(())
}
