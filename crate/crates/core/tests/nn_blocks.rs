use bga_mner::extractor::hybrid_extract;
use bga_mner::nn::{
    AttentionConfig, DecoderBlock, EncoderLayer, MultiHeadAttention, PatchProjector, Session,
    TokenEmbeddingTable,
};
use bga_mner::tensor::{finite_difference_check, Graph, ParamStore, Rng, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};

fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn eval_out(store: &ParamStore, f: impl FnOnce(&mut Session<'_>) -> Var) -> Tensor {
    let mut g = Graph::new();
    let mut s = Session::eval(&mut g, store);
    let v = f(&mut s);
    g.value(v).clone()
}

fn table() -> (ParamStore, TokenEmbeddingTable) {
    let mut store = ParamStore::new();
    let mut rng = Rng::seed_from_u64(1);
    let t = TokenEmbeddingTable::new(&mut store, &mut rng, "embed", 12, 6, 4, (1, 2, 0)).unwrap();
    (store, t)
}

#[test]
fn empty_sentence_embeds_only_the_specials() {
    let (store, t) = table();
    let out = eval_out(&store, |s| t.embed_tokens(s, &[]).unwrap());
    assert_eq!(out.shape(), &[2, 4]);
}

#[test]
fn token_rows_are_table_lookups_plus_positions() {
    let (store, t) = table();
    let out = eval_out(&store, |s| t.embed_tokens(s, &[7, 9]).unwrap());
    let emb = store.value(t.embedding);
    let pos = store.value(t.position);
    for (row, id) in [1usize, 7, 9, 2].iter().enumerate() {
        for c in 0..4 {
            let want = emb.get(*id, c) + pos.get(row, c);
            assert_eq!(out.get(row, c), want);
        }
    }
}

#[test]
fn overlong_sentence_is_rejected() {
    let (store, t) = table();
    let mut g = Graph::new();
    let mut s = Session::eval(&mut g, &store);
    assert_eq!(
        t.embed_tokens(&mut s, &[3, 4, 5, 6, 7]).unwrap_err().kind(),
        "overlength"
    );
    assert_eq!(
        t.embed_tokens(&mut s, &[30]).unwrap_err().kind(),
        "unknown_id"
    );
}

#[test]
fn zero_patches_give_positions_alone() {
    let mut store = ParamStore::new();
    let p = PatchProjector::new(&mut store, &mut Rng::seed_from_u64(2), "patch", 5, 3, 4);
    let out = eval_out(&store, |s| {
        let raw = s.graph.constant(Tensor::zeros(&[3, 5])).unwrap();
        p.embed_patches(s, raw).unwrap()
    });
    assert_eq!(&out, store.value(p.position));
}

#[test]
fn identity_projection_without_positions_is_the_identity() {
    let mut store = ParamStore::new();
    let p = PatchProjector::new(&mut store, &mut Rng::seed_from_u64(2), "patch", 4, 3, 4);
    *store.value_mut(p.projection.weight) = Tensor::identity(4);
    *store.value_mut(p.position) = Tensor::zeros(&[3, 4]);
    let raw = random(&mut Rng::seed_from_u64(3), 3, 4);
    let out = eval_out(&store, |s| {
        let r = s.graph.constant(raw.clone()).unwrap();
        p.embed_patches(s, r).unwrap()
    });
    assert_eq!(out, raw);
}

#[test]
fn projected_patch_shape() {
    let mut store = ParamStore::new();
    let p = PatchProjector::new(&mut store, &mut Rng::seed_from_u64(2), "patch", 8, 4, 16);
    let raw = random(&mut Rng::seed_from_u64(4), 4, 8);
    let out = eval_out(&store, |s| {
        let r = s.graph.constant(raw).unwrap();
        p.embed_patches(s, r).unwrap()
    });
    assert_eq!(out.shape(), &[4, 16]);
}

fn attention(d: usize, heads: usize, seed: u64) -> (ParamStore, MultiHeadAttention) {
    let mut store = ParamStore::new();
    let a = MultiHeadAttention::new(
        &mut store,
        &mut Rng::seed_from_u64(seed),
        "attn",
        AttentionConfig::new(d, heads).unwrap(),
    );
    (store, a)
}

/// Plain-arithmetic attention with the same parameters.
fn attention_oracle(
    store: &ParamStore,
    a: &MultiHeadAttention,
    q: &Tensor,
    kv: &Tensor,
    mask: Option<&Tensor>,
) -> Tensor {
    let lin = |x: &Tensor, l: &bga_mner::nn::Linear| -> Vec<Vec<f64>> {
        let w = store.value(l.weight);
        (0..x.rows())
            .map(|r| {
                (0..l.d_out)
                    .map(|c| {
                        let b = l.bias.map_or(0.0, |b| store.value(b).data()[c]);
                        b + (0..l.d_in).map(|k| x.get(r, k) * w.get(k, c)).sum::<f64>()
                    })
                    .collect()
            })
            .collect()
    };
    let (qp, kp, vp) = (lin(q, &a.q), lin(kv, &a.k), lin(kv, &a.v));
    let (h, dh) = (a.cfg.heads, a.cfg.head_dim());
    let mut cat = vec![vec![0.0; a.cfg.d]; q.rows()];
    for head in 0..h {
        for i in 0..q.rows() {
            let scores: Vec<f64> = (0..kv.rows())
                .map(|j| {
                    let dot: f64 = (0..dh)
                        .map(|c| qp[i][head * dh + c] * kp[j][head * dh + c])
                        .sum();
                    dot / (dh as f64).sqrt() + mask.map_or(0.0, |m| m.get(i, j))
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                cat[i][head * dh + c] = (0..kv.rows())
                    .map(|j| e[j] / z * vp[j][head * dh + c])
                    .sum();
            }
        }
    }
    let flat: Vec<f64> = cat.concat();
    let cat = Tensor::matrix(q.rows(), a.cfg.d, flat).unwrap();
    let rows = lin(&cat, &a.o);
    Tensor::matrix(q.rows(), a.cfg.d, rows.concat()).unwrap()
}

#[test]
fn attention_matches_the_arithmetic_oracle() {
    let (store, a) = attention(8, 2, 5);
    let mut rng = Rng::seed_from_u64(6);
    let (q, kv) = (random(&mut rng, 3, 8), random(&mut rng, 4, 8));
    let mut mask = Tensor::zeros(&[3, 4]);
    mask.data_mut()[1] = f64::NEG_INFINITY;
    mask.data_mut()[6] = f64::NEG_INFINITY;
    let got = eval_out(&store, |s| {
        let (qv, kvv) = (
            s.graph.constant(q.clone()).unwrap(),
            s.graph.constant(kv.clone()).unwrap(),
        );
        a.forward(s, qv, kvv, Some(&mask)).unwrap()
    });
    assert!(got.max_abs_diff(&attention_oracle(&store, &a, &q, &kv, Some(&mask))) < 1e-12);
}

#[test]
fn single_key_gets_all_the_weight() {
    let (store, a) = attention(4, 1, 7);
    let mut rng = Rng::seed_from_u64(8);
    let (q, kv) = (random(&mut rng, 3, 4), random(&mut rng, 1, 4));
    let mut g = Graph::new();
    let mut s = Session::eval(&mut g, &store);
    let (qv, kvv) = (s.graph.constant(q).unwrap(), s.graph.constant(kv).unwrap());
    let (_, w) = a.forward_with_weights(&mut s, qv, kvv, None).unwrap();
    assert!(g.value(w[0]).data().iter().all(|&v| v == 1.0));
}

#[test]
fn identical_keys_split_weight_evenly() {
    let (store, a) = attention(4, 1, 9);
    let mut rng = Rng::seed_from_u64(10);
    let q = random(&mut rng, 2, 4);
    let row = random(&mut rng, 1, 4);
    let kv = Tensor::from_rows(&[row.row(0).to_vec(), row.row(0).to_vec()]).unwrap();
    let mut g = Graph::new();
    let mut s = Session::eval(&mut g, &store);
    let (qv, kvv) = (s.graph.constant(q).unwrap(), s.graph.constant(kv).unwrap());
    let (_, w) = a.forward_with_weights(&mut s, qv, kvv, None).unwrap();
    assert!(g.value(w[0]).data().iter().all(|&v| v == 0.5));
}

#[test]
fn fully_masked_row_is_rejected() {
    let (store, a) = attention(4, 1, 9);
    let mut g = Graph::new();
    let mut s = Session::eval(&mut g, &store);
    let x = s.graph.constant(Tensor::zeros(&[2, 4])).unwrap();
    let mask = Tensor::full(&[2, 2], f64::NEG_INFINITY);
    assert_eq!(
        a.forward(&mut s, x, x, Some(&mask)).unwrap_err().kind(),
        "degenerate_axis"
    );
    let bad = Tensor::full(&[2, 2], 1.0);
    assert_eq!(
        a.forward(&mut s, x, x, Some(&bad)).unwrap_err().kind(),
        "invalid"
    );
}

fn encoder(seed: u64) -> (ParamStore, EncoderLayer) {
    let mut store = ParamStore::new();
    let e = EncoderLayer::new(
        &mut store,
        &mut Rng::seed_from_u64(seed),
        "enc",
        AttentionConfig::new(8, 2).unwrap(),
        16,
    );
    (store, e)
}

#[test]
fn encoder_preserves_shape() {
    let (store, e) = encoder(1);
    for n in [1, 5, 17] {
        let x = random(&mut Rng::seed_from_u64(n as u64), n, 8);
        let out = eval_out(&store, |s| {
            let v = s.graph.constant(x).unwrap();
            e.forward(s, v).unwrap()
        });
        assert_eq!(out.shape(), &[n, 8]);
    }
}

#[test]
fn encoder_gradient_check() {
    let (store, e) = encoder(2);
    let x = random(&mut Rng::seed_from_u64(3), 3, 8);
    let w = random(&mut Rng::seed_from_u64(4), 3, 8);
    let err = finite_difference_check(
        |g, x| {
            let mut s = Session::eval(g, &store);
            let y = e.forward(&mut s, x)?;
            let wv = g.constant(w.clone())?;
            let p = g.mul(y, wv)?;
            g.sum(p)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-5, "{err}");
}

#[test]
fn encoder_is_permutation_equivariant() {
    let (store, e) = encoder(5);
    let x = random(&mut Rng::seed_from_u64(6), 5, 8);
    let perm = [3, 0, 4, 1, 2];
    let px =
        Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let run = |t: Tensor| {
        eval_out(&store, |s| {
            let v = s.graph.constant(t).unwrap();
            e.forward(s, v).unwrap()
        })
    };
    let (y, py) = (run(x), run(px));
    for (k, &i) in perm.iter().enumerate() {
        for c in 0..8 {
            assert!((py.get(k, c) - y.get(i, c)).abs() < 1e-12);
        }
    }
}

fn decoder(seed: u64) -> (ParamStore, DecoderBlock) {
    let mut store = ParamStore::new();
    let d = DecoderBlock::new(
        &mut store,
        &mut Rng::seed_from_u64(seed),
        "dec",
        AttentionConfig::new(8, 2).unwrap(),
        16,
    );
    (store, d)
}

#[test]
fn zero_memory_mask_equals_unmasked() {
    let (store, d) = decoder(1);
    let mut rng = Rng::seed_from_u64(2);
    let (q, m) = (random(&mut rng, 2, 8), random(&mut rng, 3, 8));
    let run = |mask: Option<&Tensor>| {
        eval_out(&store, |s| {
            let (qv, mv) = (
                s.graph.constant(q.clone()).unwrap(),
                s.graph.constant(m.clone()).unwrap(),
            );
            d.forward(s, qv, mv, mask).unwrap()
        })
    };
    assert_eq!(run(None), run(Some(&Tensor::zeros(&[2, 3]))));
}

#[test]
fn decoder_gradient_check() {
    let (store, d) = decoder(3);
    let mut rng = Rng::seed_from_u64(4);
    let (q, m) = (random(&mut rng, 2, 8), random(&mut rng, 3, 8));
    let w = random(&mut rng, 2, 8);
    let err = finite_difference_check(
        |g, mem| {
            let mut s = Session::eval(g, &store);
            let qv = s.graph.constant(q.clone())?;
            let y = d.forward(&mut s, qv, mem, None)?;
            let wv = g.constant(w.clone())?;
            let p = g.mul(y, wv)?;
            g.sum(p)
        },
        &m,
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-5, "{err}");
}

#[test]
fn hybrid_without_generated_rows_is_the_plain_layer() {
    let (store, e) = encoder(7);
    let x = random(&mut Rng::seed_from_u64(8), 4, 8);
    let plain = eval_out(&store, |s| {
        let v = s.graph.constant(x.clone()).unwrap();
        e.forward(s, v).unwrap()
    });
    let hybrid = eval_out(&store, |s| {
        let v = s.graph.constant(x.clone()).unwrap();
        hybrid_extract(s, &e, v, None).unwrap()
    });
    assert!(plain.max_abs_diff(&hybrid) <= 1e-12);
}

#[test]
fn hybrid_equal_key_symmetry() {
    let mut store = ParamStore::new();
    let cfg = AttentionConfig::new(4, 1).unwrap();
    let e = EncoderLayer::new(&mut store, &mut Rng::seed_from_u64(9), "enc", cfg, 8);
    let row = random(&mut Rng::seed_from_u64(10), 1, 4);
    let mut g = Graph::new();
    let mut s = Session::eval(&mut g, &store);
    let p = s.graph.constant(row.clone()).unwrap();
    let o = s.graph.constant(row).unwrap();
    let kv = s.graph.concat_rows(&[p, o]).unwrap();
    let (_, w) = e.attn.forward_with_weights(&mut s, p, kv, None).unwrap();
    assert_eq!(g.value(w[0]).data(), &[0.5, 0.5]);
}

#[test]
fn hybrid_output_shapes() {
    let (store, e) = encoder(11);
    for n_p in [1, 4, 9] {
        for n_g in [0, 4] {
            let mut rng = Rng::seed_from_u64((n_p * 10 + n_g) as u64);
            let (x, gen) = (random(&mut rng, n_p, 8), random(&mut rng, n_g.max(1), 8));
            let out = eval_out(&store, |s| {
                let v = s.graph.constant(x).unwrap();
                let extra = (n_g > 0).then(|| s.graph.constant(gen).unwrap());
                hybrid_extract(s, &e, v, extra).unwrap()
            });
            assert_eq!(out.shape(), &[n_p, 8]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn masked_key_rows_do_not_influence_attention(seed in 0u64..10_000, n_kv in 2usize..7, delta in -50.0f64..50.0) {
        let (store, a) = attention(8, 2, seed);
        let mut rng = Rng::seed_from_u64(seed ^ 1);
        let (q, kv) = (random(&mut rng, 3, 8), random(&mut rng, n_kv, 8));
        let j = seed as usize % n_kv;
        let mut mask = Tensor::zeros(&[3, n_kv]);
        for r in 0..3 {
            mask.data_mut()[r * n_kv + j] = f64::NEG_INFINITY;
        }
        let mut kv2 = kv.clone();
        for c in 0..8 {
            kv2.data_mut()[j * 8 + c] += delta * (c as f64 - 3.5);
        }
        let run = |kv: Tensor| eval_out(&store, |s| {
            let (qv, kvv) = (s.graph.constant(q.clone()).unwrap(), s.graph.constant(kv).unwrap());
            a.forward(s, qv, kvv, Some(&mask)).unwrap()
        });
        prop_assert!(run(kv).max_abs_diff(&run(kv2)) <= 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one_after_masking(seed in 0u64..10_000, n_kv in 2usize..7) {
        let (store, a) = attention(8, 2, seed);
        let mut rng = Rng::seed_from_u64(seed ^ 2);
        let (q, kv) = (random(&mut rng, 3, 8), random(&mut rng, n_kv, 8));
        let mut mask = Tensor::zeros(&[3, n_kv]);
        for r in 0..3 {
            mask.data_mut()[r * n_kv + (r + seed as usize) % n_kv] = f64::NEG_INFINITY;
        }
        let mut g = Graph::new();
        let mut s = Session::eval(&mut g, &store);
        let (qv, kvv) = (s.graph.constant(q).unwrap(), s.graph.constant(kv).unwrap());
        let (_, ws) = a.forward_with_weights(&mut s, qv, kvv, Some(&mask)).unwrap();
        for w in ws {
            let t = g.value(w);
            for r in 0..3 {
                prop_assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn masked_memory_rows_do_not_influence_the_decoder(seed in 0u64..10_000, delta in -20.0f64..20.0) {
        let (store, d) = decoder(seed);
        let mut rng = Rng::seed_from_u64(seed ^ 3);
        let (q, m) = (random(&mut rng, 2, 8), random(&mut rng, 4, 8));
        let mut mask = Tensor::zeros(&[2, 4]);
        mask.data_mut()[2] = f64::NEG_INFINITY;
        mask.data_mut()[6] = f64::NEG_INFINITY;
        let mut m2 = m.clone();
        for c in 0..8 {
            m2.data_mut()[2 * 8 + c] += delta;
        }
        let run = |mem: Tensor| eval_out(&store, |s| {
            let (qv, mv) = (s.graph.constant(q.clone()).unwrap(), s.graph.constant(mem).unwrap());
            d.forward(s, qv, mv, Some(&mask)).unwrap()
        });
        prop_assert!(run(m).max_abs_diff(&run(m2)) <= 1e-12);
    }
}
