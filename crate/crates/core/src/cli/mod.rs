//! Command-line surface: data generation, training, evaluation, image-free
//! inference, mask inspection, alignment similarity and gradient checks.
//!
//! Results go to the supplied writer (stdout for the binary), progress logs
//! to stderr.

mod config;

pub use config::{DataSizes, RunConfig};

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::Serialize;

use crate::data::{
    encode_all, generate_synthetic_corpus, load_conll, read_jsonl, write_jsonl, Example,
    PairedExample, Vocab,
};
use crate::error::{Error, Result};
use crate::model::{checkpoint, evaluate, fit, BgaModel, EpochRecord, Metrics};
use crate::selfcheck::{run_gradient_suite, CheckResult};
use crate::tensor::Rng;

#[derive(Debug, Parser)]
#[command(
    name = "bga",
    about = "Multimodal entity tagging with latent cross-modal generation"
)]
pub struct Cli {
    /// Overrides the config's seed; every random choice derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired corpus and its manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a data directory, writing checkpoints and per-epoch metrics.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one split; metrics JSON to stdout.
    Eval {
        /// A checkpoint file, or a training output directory (uses best.ckpt).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Tag a text file holding one whitespace-tokenized sentence per line.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Per-layer keep/drop listing for one example's tokens and patches.
    InspectMasks {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Similarity of one sentence's pseudo visual feature to its own image
    /// and to `k` mismatched ones.
    AlignSim {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

/// Executes a parsed command, writing its result to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData { config, out: dir } => cmd_gen_data(
            &RunConfig::load(config.as_deref())?.with_seed(seed),
            &dir,
            out,
        ),
        Command::Train {
            config,
            data,
            out: dir,
        } => cmd_train(
            &RunConfig::load(config.as_deref())?.with_seed(seed),
            &data,
            &dir,
            out,
        ),
        Command::Eval {
            checkpoint,
            data,
            split,
        } => cmd_eval(&checkpoint, &data, &split, out),
        Command::Infer { checkpoint, data } => cmd_infer(&checkpoint, &data, out),
        Command::InspectMasks {
            checkpoint,
            data,
            split,
            index,
        } => cmd_inspect_masks(&checkpoint, &data, &split, index, out),
        Command::AlignSim {
            checkpoint,
            data,
            split,
            index,
            k,
        } => cmd_align_sim(&checkpoint, &data, &split, index, k, seed.unwrap_or(0), out),
        Command::Gradcheck => cmd_gradcheck(seed.unwrap_or(0), out),
    }
}

/// The single-line error report printed on failure.
pub fn error_line(e: &Error) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}

fn io(e: std::io::Error) -> Error {
    Error::Io(e)
}

fn write_json(out: &mut dyn Write, value: &impl Serialize) -> Result<()> {
    writeln!(out, "{}", serde_json::to_string_pretty(value)?).map_err(io)
}

/// Loads `{split}.jsonl`, falling back to `{split}.conll`, from a directory;
/// a file path is read directly by extension.
pub fn load_split(data: &Path, split: &str) -> Result<Vec<Example>> {
    let read = |p: &Path| -> Result<Vec<Example>> {
        if p.extension().is_some_and(|e| e == "conll") {
            load_conll(p)
        } else {
            read_jsonl(p)
        }
    };
    if data.is_file() {
        return read(data);
    }
    for ext in ["jsonl", "conll"] {
        let p = data.join(format!("{split}.{ext}"));
        if p.is_file() {
            return read(&p);
        }
    }
    Err(Error::MissingFile(
        data.join(format!("{split}.jsonl")).display().to_string(),
    ))
}

/// A checkpoint file, or `best.ckpt` inside a training output directory.
pub fn resolve_checkpoint(path: &Path) -> Result<BgaModel> {
    let file = if path.is_dir() {
        path.join("best.ckpt")
    } else {
        path.to_path_buf()
    };
    if !file.is_file() {
        return Err(Error::MissingFile(file.display().to_string()));
    }
    checkpoint::load(file)
}

#[derive(Serialize)]
struct GenSummary {
    sizes: [usize; 3],
    seed: u64,
    test_ceiling_f1: f64,
    test_oracle_f1: f64,
}

pub fn cmd_gen_data(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let corpus = generate_synthetic_corpus(&cfg.schema, cfg.data.as_array(), cfg.seed())?;
    std::fs::create_dir_all(dir)?;
    write_jsonl(dir.join("train.jsonl"), &corpus.train)?;
    write_jsonl(dir.join("dev.jsonl"), &corpus.dev)?;
    write_jsonl(dir.join("test.jsonl"), &corpus.test)?;
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&corpus.manifest)?,
    )?;
    eprintln!("wrote corpus to {}", dir.display());
    write_json(
        out,
        &GenSummary {
            sizes: corpus.manifest.sizes,
            seed: corpus.manifest.seed,
            test_ceiling_f1: corpus.manifest.test_ceiling.analytic_f1,
            test_oracle_f1: corpus.manifest.test_ceiling.oracle.f1,
        },
    )
}

#[derive(Serialize)]
struct TrainReport<'a> {
    num_params: usize,
    best_epoch: usize,
    epochs: &'a [EpochRecord],
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let train_ex = load_split(data, "train")?;
    let dev_ex = match load_split(data, "dev") {
        Ok(d) => d,
        Err(Error::MissingFile(_)) => Vec::new(),
        Err(e) => return Err(e),
    };
    let vocab = Vocab::build(&train_ex);
    let mut types = crate::data::entity_types(&train_ex);
    if types.is_empty() {
        types = cfg.model.entity_types.clone();
    }
    let mut model_cfg = cfg.model.clone();
    model_cfg.bind_data(vocab.len(), &types)?;
    let mut model = BgaModel::new(model_cfg, vocab)?;
    let labels = model.labels.clone();
    let train = encode_all(&train_ex, &model.vocab, &labels)?;
    let dev = encode_all(&dev_ex, &model.vocab, &labels)?;
    eprintln!(
        "training {} parameters on {} sentences ({} dev)",
        model.num_params(),
        train.len(),
        dev.len()
    );
    let outcome = fit(&mut model, &train, &dev, &cfg.train, cfg.seed(), |r| {
        let dev_f1 = r
            .dev
            .as_ref()
            .map_or(String::from("-"), |m| format!("{:.4}", m.overall.f1));
        eprintln!(
            "epoch {} loss {:.4} mner {:.4} recon {:.4} cycle {:.4} dev_f1 {dev_f1}",
            r.epoch, r.mean_loss, r.mean_mner, r.mean_recon, r.mean_cycle
        );
    })?;
    std::fs::create_dir_all(dir)?;
    checkpoint::save(&model, dir.join("last.ckpt"))?;
    model.store = outcome.best_store;
    checkpoint::save(&model, dir.join("best.ckpt"))?;
    let report = TrainReport {
        num_params: model.num_params(),
        best_epoch: outcome.best_epoch,
        epochs: &outcome.epochs,
    };
    std::fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    write_json(out, &report)
}

fn encoded_split(model: &BgaModel, data: &Path, split: &str) -> Result<Vec<PairedExample>> {
    encode_all(&load_split(data, split)?, &model.vocab, &model.labels)
}

pub fn cmd_eval(ckpt: &Path, data: &Path, split: &str, out: &mut dyn Write) -> Result<()> {
    let model = resolve_checkpoint(ckpt)?;
    let metrics: Metrics = evaluate(&model, &encoded_split(&model, data, split)?)?;
    write_json(out, &metrics)
}

pub fn cmd_infer(ckpt: &Path, text: &Path, out: &mut dyn Write) -> Result<()> {
    let model = resolve_checkpoint(ckpt)?;
    let body = std::fs::read_to_string(text)
        .map_err(|_| Error::MissingFile(text.display().to_string()))?;
    let mut first = true;
    for line in body.lines() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if !first {
            writeln!(out).map_err(io)?;
        }
        first = false;
        for (tok, tag) in tokens.iter().zip(model.infer_tokens(&tokens)?) {
            writeln!(out, "{tok}\t{tag}").map_err(io)?;
        }
    }
    Ok(())
}

fn pick<T>(items: &[T], index: usize) -> Result<&T> {
    items.get(index).ok_or_else(|| {
        Error::invalid(format!(
            "index {index} outside split of {} examples",
            items.len()
        ))
    })
}

pub fn cmd_inspect_masks(
    ckpt: &Path,
    data: &Path,
    split: &str,
    index: usize,
    out: &mut dyn Write,
) -> Result<()> {
    let model = resolve_checkpoint(ckpt)?;
    let raw = load_split(data, split)?;
    let ex = PairedExample::encode(pick(&raw, index)?, &model.vocab, &model.labels)?;
    let mut names = vec!["[CLS]".to_string()];
    names.extend(raw[index].tokens.iter().cloned());
    names.push("[SEP]".into());
    let reports = model.inspect_masks(&ex)?;
    if reports.is_empty() {
        writeln!(out, "model has no sampling layers").map_err(io)?;
    }
    for (l, r) in reports.iter().enumerate() {
        writeln!(
            out,
            "layer {}: {} of {} tokens kept",
            l + 1,
            r.text.count(),
            r.text.len()
        )
        .map_err(io)?;
        for ((name, &keep), p) in names.iter().zip(r.text.bits()).zip(&r.keep_probs_text) {
            writeln!(
                out,
                "  {:<5} {p:.3}  {name}",
                if keep { "keep" } else { "drop" }
            )
            .map_err(io)?;
        }
        match (&r.visual, &r.keep_probs_visual) {
            (Some(v), Some(probs)) => {
                writeln!(out, "  patches: {} of {} kept", v.count(), v.len()).map_err(io)?;
                for (i, (&keep, p)) in v.bits().iter().zip(probs).enumerate() {
                    writeln!(
                        out,
                        "  {:<5} {p:.3}  patch {i}",
                        if keep { "keep" } else { "drop" }
                    )
                    .map_err(io)?;
                }
            }
            _ => writeln!(out, "  patches: no image").map_err(io)?,
        }
    }
    Ok(())
}

pub fn cmd_align_sim(
    ckpt: &Path,
    data: &Path,
    split: &str,
    index: usize,
    k: usize,
    seed: u64,
    out: &mut dyn Write,
) -> Result<()> {
    let model = resolve_checkpoint(ckpt)?;
    let examples = encoded_split(&model, data, split)?;
    let target = pick(&examples, index)?;
    let paired = target
        .patches
        .clone()
        .ok_or_else(|| Error::invalid(format!("example {index} has no image")))?;
    let mut others: Vec<usize> = (0..examples.len())
        .filter(|&i| i != index && examples[i].has_image)
        .collect();
    if others.len() < k || k == 0 {
        return Err(Error::invalid(format!(
            "need {k} mismatched images, split has {} (k must be at least 1)",
            others.len()
        )));
    }
    others.shuffle(&mut Rng::seed_from_u64(seed));
    others.truncate(k);
    let mut candidates = vec![paired];
    candidates.extend(
        others
            .iter()
            .map(|&i| examples[i].patches.clone().expect("filtered")),
    );
    let sims = model.alignment_similarity(&target.ids, &candidates)?;
    let rank = 1 + sims[1..].iter().filter(|&&s| s >= sims[0]).count();
    writeln!(out, "{:<10} {:>7} {:>9}", "candidate", "example", "cosine").map_err(io)?;
    writeln!(out, "{:<10} {index:>7} {:>9.4}", "paired", sims[0]).map_err(io)?;
    for (i, s) in others.iter().zip(&sims[1..]) {
        writeln!(out, "{:<10} {i:>7} {s:>9.4}", "mismatched").map_err(io)?;
    }
    writeln!(out, "paired image ranks {rank} of {}", sims.len()).map_err(io)
}

pub fn cmd_gradcheck(seed: u64, out: &mut dyn Write) -> Result<()> {
    let results: Vec<CheckResult> = run_gradient_suite(seed)?;
    let mut worst_leaf: f64 = 0.0;
    let mut worst: f64 = 0.0;
    for r in &results {
        writeln!(
            out,
            "{} {:<40} {:.3e} (tol {:.0e})",
            if r.passed() { "ok  " } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.tolerance
        )
        .map_err(io)?;
        worst = worst.max(r.max_rel_error);
        if r.tolerance <= crate::selfcheck::LEAF_TOLERANCE {
            worst_leaf = worst_leaf.max(r.max_rel_error);
        }
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        writeln!(
            out,
            "PASS max rel error {worst:.3e} (leaf ops {worst_leaf:.3e})"
        )
        .map_err(io)
    } else {
        writeln!(out, "FAIL {}", failed.join(", ")).map_err(io)?;
        Err(Error::GradientCheck(failed.join(", ")))
    }
}
