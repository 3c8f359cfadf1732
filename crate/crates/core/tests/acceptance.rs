//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Criteria 6 and 7 train two full models and take a few
//! minutes on one core.

use std::time::Instant;

use bga_mner::crf::{crf_log_partition, crf_nll, viterbi_decode, CrfWeights};
use bga_mner::data::{
    encode_all, generate_synthetic_corpus, PairedExample, SyntheticSchema, Vocab,
};
use bga_mner::mcg::{forward_generation, GeneratorParams};
use bga_mner::model::{
    checkpoint, fit, generation_term, run_comparison, BgaModel, Metrics, ModelConfig, TrainConfig,
    Variant,
};
use bga_mner::nn::{AttentionConfig, Session};
use bga_mner::scs::{LayerMask, MaskVector};
use bga_mner::selfcheck::{run_gradient_suite, tiny_model, LEAF_TOLERANCE};
use bga_mner::tensor::{Graph, ParamStore, Rng, Tensor};
use rand::{Rng as _, SeedableRng};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect(),
    )
    .unwrap()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = run_gradient_suite(0).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    let worst = |leaf: bool| {
        results
            .iter()
            .filter(|r| (r.tolerance <= LEAF_TOLERANCE) == leaf)
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    };
    check(
        failed.is_empty() && secs < 120.0,
        format!(
            "{} checks, worst leaf {:.2e}, worst composite {:.2e}, {secs:.1}s, failed {failed:?}",
            results.len(),
            worst(true),
            worst(false)
        ),
    )
}

/// Every label sequence scored from scratch.
fn enumerate(em: &Tensor, w: &CrfWeights) -> Vec<(Vec<usize>, f64)> {
    let (n, l) = (em.rows(), em.cols());
    (0..l.pow(n as u32))
        .map(|code| {
            let seq: Vec<usize> = (0..n).map(|i| code / l.pow(i as u32) % l).collect();
            let mut s = w.start.data()[seq[0]] + em.get(0, seq[0]);
            for i in 1..n {
                s += w.transitions.get(seq[i - 1], seq[i]) + em.get(i, seq[i]);
            }
            (seq, s)
        })
        .collect()
}

fn crf_oracle() -> Outcome {
    let mut rng = Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (n, l) = (rng.random_range(1..=6), rng.random_range(1..=5));
        let em = random(&mut rng, n, l);
        let w = CrfWeights::new(
            random(&mut rng, l, l),
            Tensor::vector((0..l).map(|_| rng.random_range(-2.0..2.0)).collect()),
        )
        .map_err(|e| e.to_string())?;
        let all = enumerate(&em, &w);
        let best = all
            .iter()
            .map(|(_, s)| *s)
            .fold(f64::NEG_INFINITY, f64::max);
        let logz = best + all.iter().map(|(_, s)| (s - best).exp()).sum::<f64>().ln();
        let (path, score) = viterbi_decode(&em, &w).map_err(|e| e.to_string())?;
        let path_score = all
            .iter()
            .find(|(q, _)| *q == path)
            .map(|(_, s)| *s)
            .unwrap();
        let gold = &all[rng.random_range(0..all.len())];
        let nll = crf_nll(&em, &w, &gold.0).map_err(|e| e.to_string())?;
        let expected_nll = (logz - gold.1).max(0.0);
        worst = worst
            .max((crf_log_partition(&em, &w).map_err(|e| e.to_string())? - logz).abs())
            .max((score - best).abs())
            .max((path_score - best).abs())
            .max((nll - expected_nll).abs());
    }
    check(
        worst <= 1e-10,
        format!("200 instances, worst deviation {worst:.2e}"),
    )
}

fn mask_semantics() -> Outcome {
    let cfg = AttentionConfig::new(8, 2).unwrap();
    let mut worst: f64 = 0.0;
    for case in 0..100u64 {
        let mut rng = Rng::seed_from_u64(300 + case);
        let (n_t, n_v) = (rng.random_range(2..=8), rng.random_range(2..=6));
        let mut store = ParamStore::new();
        let params = GeneratorParams::new(&mut store, &mut rng, "gen", cfg, 16, 1, n_v, n_t);
        let draw = |rng: &mut Rng, n: usize| {
            let mut bits: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            let forced = rng.random_range(0..n);
            bits[forced] = true;
            MaskVector::new(bits)
        };
        let (m_t, m_v) = (draw(&mut rng, n_t), draw(&mut rng, n_v));
        let (text, visual) = (random(&mut rng, n_t, 8), random(&mut rng, n_v, 8));
        let delta = rng.random_range(-50.0..50.0);
        let perturb = |x: &Tensor, m: &MaskVector| {
            let mut y = x.clone();
            for (i, &keep) in m.bits().iter().enumerate() {
                if !keep {
                    for c in 0..8 {
                        y.data_mut()[i * 8 + c] += delta;
                    }
                }
            }
            y
        };
        let run = |t: &Tensor, v: &Tensor| {
            let mut g = Graph::new();
            let mut s = Session::eval(&mut g, &store);
            let (tv, vv) = (
                s.graph.constant(t.clone()).unwrap(),
                s.graph.constant(v.clone()).unwrap(),
            );
            let mt = LayerMask::constant(s.graph, m_t.clone()).unwrap();
            let mv = LayerMask::constant(s.graph, m_v.clone()).unwrap();
            let out =
                forward_generation(&mut s, &params, tv, Some(vv), &mt, Some(&mv), true).unwrap();
            (
                g.value(out.v_hat).clone(),
                g.value(out.t_hat.unwrap()).clone(),
            )
        };
        let (a_v, a_t) = run(&text, &visual);
        let (b_v, b_t) = run(&perturb(&text, &m_t), &perturb(&visual, &m_v));
        worst = worst
            .max(a_v.max_abs_diff(&b_v))
            .max(a_t.max_abs_diff(&b_t));
    }
    check(
        worst <= 1e-12,
        format!("100 configurations, worst change {worst:.2e}"),
    )
}

fn random_batch(model: &BgaModel, rng: &mut Rng, size: usize) -> Vec<PairedExample> {
    let c = &model.config;
    (0..size)
        .map(|_| {
            let n = rng.random_range(1..=c.max_len);
            let has_image = rng.random_bool(0.5);
            PairedExample {
                ids: (0..n).map(|_| rng.random_range(4..c.vocab_size)).collect(),
                tags: (0..n)
                    .map(|_| rng.random_range(0..model.labels.len()))
                    .collect(),
                patches: Some(random(rng, c.num_patches, c.raw_dim)),
                has_image,
            }
        })
        .collect()
}

fn loss_laws() -> Outcome {
    let mut negatives = 0;
    let mut nonzero_missing = 0;
    let mut alpha_mismatch = 0;
    for case in 0..50u64 {
        let (mut model, _) = tiny_model(case).map_err(|e| e.to_string())?;
        let mut rng = Rng::seed_from_u64(400 + case);
        let batch = random_batch(&model, &mut rng, 4);
        let refs: Vec<&PairedExample> = batch.iter().collect();
        for alpha in [1.0, 0.0] {
            model.config.alpha = alpha;
            let mut g = Graph::new();
            let mut s = Session::train(&mut g, &model.store, Rng::seed_from_u64(case), 0.0);
            let f = model
                .forward_batch(&mut s, &refs)
                .map_err(|e| e.to_string())?;
            for (ex, trace) in batch.iter().zip(&f.traces) {
                for step in &trace.steps {
                    let (r, c) = (
                        step.generation.recon_value(&g),
                        step.generation.cycle_value(&g),
                    );
                    negatives += usize::from(r < 0.0) + usize::from(c < 0.0);
                    if !ex.has_image {
                        nonzero_missing += usize::from(r != 0.0 || c != 0.0);
                    }
                }
            }
            if alpha == 0.0 && g.value(f.loss).item().to_bits() != g.value(f.mner).item().to_bits()
            {
                alpha_mismatch += 1;
            }
        }
    }
    check(
        negatives + nonzero_missing + alpha_mismatch == 0,
        format!("50 batches: {negatives} negative, {nonzero_missing} nonzero without image, {alpha_mismatch} alpha=0 mismatches"),
    )
}

fn image_free_inference() -> Outcome {
    let mut mismatches = 0;
    let mut total = 0;
    for case in 0..20u64 {
        let (model, _) = tiny_model(case).map_err(|e| e.to_string())?;
        let mut rng = Rng::seed_from_u64(500 + case);
        let batch: Vec<PairedExample> = random_batch(&model, &mut rng, 3)
            .into_iter()
            .map(|mut e| {
                e.has_image = true;
                e
            })
            .collect();
        let mut altered = batch.clone();
        for e in &mut altered {
            e.patches = Some(random(
                &mut rng,
                model.config.num_patches,
                model.config.raw_dim,
            ));
        }
        let w = model.crf.weights(&model.store);
        for variant_batch in [&batch, &altered] {
            let refs: Vec<&PairedExample> = variant_batch.iter().collect();
            let mut g = Graph::new();
            let mut s = Session::eval(&mut g, &model.store);
            let f = model
                .forward_batch(&mut s, &refs)
                .map_err(|e| e.to_string())?;
            for (ex, trace) in variant_batch.iter().zip(&f.traces) {
                let branch = viterbi_decode(g.value(trace.emissions), &w)
                    .map_err(|e| e.to_string())?
                    .0;
                let tags = model.infer(&ex.ids).map_err(|e| e.to_string())?;
                total += 1;
                mismatches += usize::from(branch != tags);
            }
        }
    }
    check(
        mismatches == 0,
        format!("{total} sentences, {mismatches} differ"),
    )
}

fn determinism_and_persistence() -> Outcome {
    let schema = SyntheticSchema::default();
    let corpus = generate_synthetic_corpus(&schema, [48, 8, 8], 3).map_err(|e| e.to_string())?;
    let vocab = Vocab::build(&corpus.train);
    let mut cfg = ModelConfig {
        d: 16,
        heads: 2,
        seed: 5,
        ..ModelConfig::default()
    };
    cfg.bind_data(vocab.len(), &schema.types)
        .map_err(|e| e.to_string())?;
    let labels = cfg.labels().map_err(|e| e.to_string())?;
    let train = encode_all(&corpus.train, &vocab, &labels).map_err(|e| e.to_string())?;
    let dev = encode_all(&corpus.dev, &vocab, &labels).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let run = || -> bga_mner::Result<Vec<u8>> {
        let mut model = BgaModel::new(cfg.clone(), vocab.clone())?;
        fit(&mut model, &train, &dev, &tc, 9, |_| {})?;
        checkpoint::to_bytes(&model)
    };
    let (a, b) = (
        run().map_err(|e| e.to_string())?,
        run().map_err(|e| e.to_string())?,
    );
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    let model = checkpoint::from_bytes(&a).map_err(|e| e.to_string())?;
    checkpoint::save(&model, &path).map_err(|e| e.to_string())?;
    let loaded = checkpoint::load(&path).map_err(|e| e.to_string())?;
    let reloaded = checkpoint::to_bytes(&loaded).map_err(|e| e.to_string())?;
    let params_equal = model.store.ids().all(|id| {
        let (x, y) = (model.store.value(id).data(), loaded.store.value(id).data());
        x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
    });

    let t = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let gold = vec![
        t(&["B-PER", "I-PER", "O", "B-LOC"]),
        t(&["O", "B-ORG", "O"]),
        t(&["B-PER", "O"]),
        t(&["B-LOC", "I-LOC", "O", "B-PER"]),
        t(&["O", "O"]),
    ];
    let pred = vec![
        t(&["B-PER", "I-PER", "O", "B-LOC"]),
        t(&["O", "B-PER", "O"]),
        t(&["B-PER", "O"]),
        t(&["B-ORG", "I-ORG", "O", "O"]),
        t(&["O", "B-ORG"]),
    ];
    let m =
        Metrics::from_tags(&pred, &gold, &t(&["LOC", "ORG", "PER"])).map_err(|e| e.to_string())?;
    // PER: 3 gold, 3 predicted, 2 correct. LOC: 2, 1, 1. ORG: 1, 2, 0.
    let want = serde_json::json!({
        "overall": {"p": 0.5, "r": 0.5, "f1": 0.5},
        "per_type": {
            "LOC": {"p": 1.0, "r": 0.5, "f1": 2.0 / 3.0},
            "ORG": {"p": 0.0, "r": 0.0, "f1": 0.0},
            "PER": {"p": 2.0 / 3.0, "r": 2.0 / 3.0, "f1": 2.0 / 3.0},
        }
    });
    let fixture_ok = serde_json::to_value(&m).map_err(|e| e.to_string())? == want;
    check(
        a == b && reloaded == a && params_equal && fixture_ok,
        format!(
            "checkpoints identical: {}, round trip bitwise: {}, fixture exact: {fixture_ok}",
            a == b,
            reloaded == a && params_equal
        ),
    )
}

fn sharing_and_averaging() -> Outcome {
    let make = |layers| {
        let vocab = Vocab::from((0..6).map(|i| format!("w{i}")).collect::<Vec<_>>());
        let cfg = ModelConfig {
            d: 8,
            heads: 2,
            layers,
            vocab_size: vocab.len(),
            entity_types: vec!["A".into()],
            ..ModelConfig::default()
        };
        BgaModel::new(cfg, vocab).unwrap()
    };
    let (two, four) = (make(2), make(4));
    let mut rng = Rng::seed_from_u64(9);
    let mut exact = true;
    for n in [2, 4] {
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let base = generation_term(&r, &c, 0.001, n).map_err(|e| e.to_string())?;
        let r2: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        let c2: Vec<f64> = c.iter().map(|v| 2.0 * v).collect();
        exact &= generation_term(&r2, &c2, 0.001, n).map_err(|e| e.to_string())? == 2.0 * base;
    }
    check(
        two.generator_params() == four.generator_params() && exact,
        format!(
            "generator params N=2 {} N=4 {}, doubling exact: {exact}",
            two.generator_params(),
            four.generator_params()
        ),
    )
}

/// Criteria 6 and 7 share one training run.
fn learnability_and_alignment() -> (Outcome, Outcome) {
    let start = Instant::now();
    let result = run_comparison(
        &SyntheticSchema::default(),
        [4000, 500, 500],
        7,
        &ModelConfig::default(),
        &TrainConfig::default(),
        |variant, r| {
            eprintln!(
                "  {variant:?} epoch {} loss {:.4} recon {:.4} cycle {:.4} dev f1 {:.4}",
                r.epoch,
                r.mean_loss,
                r.mean_recon,
                r.mean_cycle,
                r.dev.as_ref().map_or(f64::NAN, |m| m.overall.f1)
            )
        },
    );
    let (report, _) = match result {
        Ok(r) => r,
        Err(e) => return (Err(e.to_string()), Err(e.to_string())),
    };
    let (bga, base) = (report.bga.test.overall.f1, report.text_only.test.overall.f1);
    let ceiling = report.ceiling.analytic_f1;
    let learn = check(
        report.gap() >= 0.10 && base < ceiling,
        format!(
            "bga {bga:.4}, text-only {base:.4}, gap {:+.2} points (need +10), ceiling {ceiling:.4}, {:.0}s",
            100.0 * report.gap(),
            start.elapsed().as_secs_f64()
        ),
    );
    let a = &report.alignment;
    let align = check(
        a.accuracy >= 0.8,
        format!(
            "{} of {} held-out pairs ranked first ({:.3}, need 0.8)",
            a.wins, a.pairs, a.accuracy
        ),
    );
    debug_assert_eq!(report.bga.variant, Variant::Bga);
    (learn, align)
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "gradient suite", gradient_suite()),
        (2, "crf oracle equivalence", crf_oracle()),
        (3, "mask semantics", mask_semantics()),
        (4, "loss laws", loss_laws()),
        (5, "image-free inference", image_free_inference()),
    ];
    let (learn, align) = learnability_and_alignment();
    results.push((6, "synthetic learnability", learn));
    results.push((7, "alignment", align));
    results.push((
        8,
        "determinism and persistence",
        determinism_and_persistence(),
    ));
    results.push((9, "sharing and averaging", sharing_and_averaging()));
    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(d) => println!("PASS {n} {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {n} {name}: {d}");
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
