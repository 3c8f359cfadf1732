//! Finite-difference gradient suite over every differentiable operation,
//! the composite blocks, and a tiny end-to-end model.

use rand::{Rng as _, SeedableRng};
use serde::Serialize;

use crate::crf;
use crate::data::{PairedExample, Vocab};
use crate::error::Result;
use crate::mcg::{feature_kl, forward_generation, GeneratorParams};
use crate::model::{BgaModel, ModelConfig};
use crate::nn::{AttentionConfig, DecoderBlock, EncoderLayer, MultiHeadAttention, Session};
use crate::scs::{masked_gap, scs_forward, LayerMask, MaskVector, ScsParams};
use crate::tensor::{
    finite_difference_check, finite_difference_check_at, kl_divergence, Graph, ParamStore, Rng,
    Tensor, Var,
};

pub const LEAF_TOLERANCE: f64 = 1e-5;
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;
const LEAF_EPS: f64 = 1e-6;
const COMPOSITE_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

fn random(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .expect("shape")
}

/// Fixed pseudo-random weights for a shape, so every evaluation of a probe
/// uses the same scalarization.
fn weights_for(shape: &[usize]) -> Tensor {
    let seed = shape
        .iter()
        .fold(17u64, |h, &d| h.wrapping_mul(31).wrapping_add(d as u64));
    random(&mut Rng::seed_from_u64(seed), shape, -1.0, 1.0)
}

/// Reduces any output to a scalar with generic (non-uniform) weights.
fn probe(g: &mut Graph, y: Var) -> Result<Var> {
    if g.value(y).is_scalar() {
        return Ok(y);
    }
    let w = g.constant(weights_for(g.shape(y)))?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

struct Suite {
    results: Vec<CheckResult>,
}

impl Suite {
    fn leaf(
        &mut self,
        name: &str,
        x: &Tensor,
        f: impl Fn(&mut Graph, Var) -> Result<Var>,
    ) -> Result<()> {
        let err = finite_difference_check(|g, x| f(g, x).and_then(|y| probe(g, y)), x, LEAF_EPS)?;
        self.push(name, err, LEAF_TOLERANCE);
        Ok(())
    }

    fn composite(
        &mut self,
        name: &str,
        x: &Tensor,
        f: impl Fn(&mut Graph, Var) -> Result<Var>,
    ) -> Result<()> {
        let err =
            finite_difference_check(|g, x| f(g, x).and_then(|y| probe(g, y)), x, COMPOSITE_EPS)?;
        self.push(name, err, COMPOSITE_TOLERANCE);
        Ok(())
    }

    fn push(&mut self, name: &str, err: f64, tol: f64) {
        self.results.push(CheckResult {
            name: name.to_string(),
            max_rel_error: err,
            tolerance: tol,
        });
    }
}

/// Every primitive graph operation, the CRF and the KL helpers.
pub fn leaf_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut s = Suite {
        results: Vec::new(),
    };
    let a = random(&mut rng, &[3, 4], -1.0, 1.0);
    let b = random(&mut rng, &[4, 2], -1.0, 1.0);
    let bt = random(&mut rng, &[2, 4], -1.0, 1.0);
    let c = random(&mut rng, &[3, 4], -1.0, 1.0);
    let row = random(&mut rng, &[4], -1.0, 1.0);
    let col = random(&mut rng, &[3], 0.5, 1.5);
    let pos = random(&mut rng, &[3, 4], 0.1, 1.0);
    let pos2 = random(&mut rng, &[3, 4], 0.1, 1.0);
    let away = Tensor::new(
        vec![3, 4],
        random(&mut rng, &[12], 0.1, 1.0)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| if i % 2 == 0 { *v } else { -v })
            .collect(),
    )?;
    let mut mask = Tensor::zeros(&[3, 4]);
    mask.data_mut()[1] = f64::NEG_INFINITY;
    mask.data_mut()[6] = f64::NEG_INFINITY;
    mask.data_mut()[7] = f64::NEG_INFINITY;

    let k = |g: &mut Graph, t: &Tensor| g.constant(t.clone());
    s.leaf("matmul (lhs)", &a, |g, x| {
        let y = k(g, &b)?;
        g.matmul(x, y)
    })?;
    s.leaf("matmul (rhs)", &b, |g, x| {
        let y = k(g, &a)?;
        g.matmul(y, x)
    })?;
    s.leaf("matmul_nt (lhs)", &a, |g, x| {
        let y = k(g, &bt)?;
        g.matmul_nt(x, y)
    })?;
    s.leaf("matmul_nt (rhs)", &bt, |g, x| {
        let y = k(g, &a)?;
        g.matmul_nt(y, x)
    })?;
    s.leaf("add", &a, |g, x| {
        let y = k(g, &c)?;
        g.add(x, y)
    })?;
    s.leaf("sub", &a, |g, x| {
        let y = k(g, &c)?;
        g.sub(y, x)
    })?;
    s.leaf("mul", &a, |g, x| {
        let y = k(g, &c)?;
        g.mul(x, y)
    })?;
    s.leaf("mul (square)", &a, |g, x| g.mul(x, x))?;
    s.leaf("add_row (matrix)", &a, |g, x| {
        let y = k(g, &row)?;
        g.add_row(x, y)
    })?;
    s.leaf("add_row (row)", &row, |g, x| {
        let y = k(g, &a)?;
        g.add_row(y, x)
    })?;
    s.leaf("scale_rows (matrix)", &a, |g, x| {
        let y = k(g, &col)?;
        g.scale_rows(x, y)
    })?;
    s.leaf("scale_rows (weights)", &col, |g, x| {
        let y = k(g, &a)?;
        g.scale_rows(y, x)
    })?;
    s.leaf("scale", &a, |g, x| g.scale(x, -1.7))?;
    s.leaf("div_scalar (numerator)", &a, |g, x| {
        let d = k(g, &Tensor::scalar(1.3))?;
        g.div_scalar(x, d)
    })?;
    s.leaf("div_scalar (denominator)", &Tensor::scalar(1.3), |g, x| {
        let y = k(g, &a)?;
        g.div_scalar(y, x)
    })?;
    s.leaf("clamp_min", &away, |g, x| g.clamp_min(x, 0.0))?;
    s.leaf("transpose", &a, |g, x| g.transpose(x))?;
    s.leaf("reshape", &a, |g, x| g.reshape(x, &[2, 6]))?;
    s.leaf("softmax", &a, |g, x| g.softmax(x))?;
    s.leaf("softmax (masked)", &a, |g, x| g.softmax_masked(x, &mask))?;
    s.leaf("gelu", &a, |g, x| g.gelu(x))?;
    let gamma = random(&mut rng, &[4], 0.5, 1.5);
    s.leaf("layer_norm (input)", &a, |g, x| {
        let (gm, bt) = (k(g, &gamma)?, k(g, &row)?);
        g.layer_norm(x, gm, bt)
    })?;
    s.leaf("layer_norm (gain)", &gamma, |g, x| {
        let (xa, bt) = (k(g, &a)?, k(g, &row)?);
        g.layer_norm(xa, x, bt)
    })?;
    s.leaf("layer_norm (bias)", &row, |g, x| {
        let (xa, gm) = (k(g, &a)?, k(g, &gamma)?);
        g.layer_norm(xa, gm, x)
    })?;
    s.leaf("concat_rows", &a, |g, x| {
        let y = k(g, &c)?;
        g.concat_rows(&[x, y, x])
    })?;
    s.leaf("concat_cols", &a, |g, x| {
        let y = k(g, &c)?;
        g.concat_cols(&[y, x])
    })?;
    s.leaf("slice_rows", &a, |g, x| g.slice_rows(x, 1, 2))?;
    s.leaf("slice_cols", &a, |g, x| g.slice_cols(x, 1, 2))?;
    s.leaf("gather_rows", &a, |g, x| g.gather_rows(x, &[2, 0, 2, 1]))?;
    let one_row = random(&mut rng, &[1, 4], -1.0, 1.0);
    s.leaf("broadcast_rows", &one_row, |g, x| g.broadcast_rows(x, 3))?;
    s.leaf("index", &a, |g, x| g.index(x, 5))?;
    s.leaf("sum", &a, |g, x| g.sum(x))?;
    s.leaf("mean_rows", &a, |g, x| g.mean_rows(x))?;
    s.leaf("kl_rows (p)", &pos, |g, x| {
        let q = k(g, &pos2)?;
        g.kl_rows(x, q)
    })?;
    s.leaf("kl_rows (q)", &pos2, |g, x| {
        let p = k(g, &pos)?;
        g.kl_rows(p, x)
    })?;
    let logits = random(&mut rng, &[5], -1.0, 1.0);
    let other = random(&mut rng, &[5], -1.0, 1.0);
    s.leaf("kl_divergence", &logits, |g, x| {
        let p = g.softmax(x)?;
        let qv = k(g, &other)?;
        let q = g.softmax(qv)?;
        kl_divergence(g, p, q)
    })?;

    let (n, l) = (4, 3);
    let em = random(&mut rng, &[n, l], -2.0, 2.0);
    let tr = random(&mut rng, &[l, l], -1.0, 1.0);
    let st = random(&mut rng, &[l], -1.0, 1.0);
    let tags = [0, 2, 2, 1];
    s.leaf("crf_log_partition (emissions)", &em, |g, x| {
        let (t, s0) = (k(g, &tr)?, k(g, &st)?);
        crf::log_partition_op(g, x, t, s0)
    })?;
    s.leaf("crf_log_partition (transitions)", &tr, |g, x| {
        let (e, s0) = (k(g, &em)?, k(g, &st)?);
        crf::log_partition_op(g, e, x, s0)
    })?;
    s.leaf("crf_nll (emissions)", &em, |g, x| {
        let (t, s0) = (k(g, &tr)?, k(g, &st)?);
        crf::nll_op(g, x, t, s0, &tags)
    })?;
    s.leaf("crf_nll (start)", &st, |g, x| {
        let (e, t) = (k(g, &em)?, k(g, &tr)?);
        crf::nll_op(g, e, t, x, &tags)
    })?;
    let m = Tensor::vector(vec![1.0, 0.0, 1.0]);
    s.leaf("masked_gap (features)", &a, |g, x| {
        let mv = k(g, &m)?;
        masked_gap(g, x, mv)
    })?;
    s.leaf("masked_gap (mask)", &m, |g, x| {
        let xa = k(g, &a)?;
        masked_gap(g, xa, x)
    })?;
    s.leaf("feature_kl", &a, |g, x| {
        let (t, mv) = (k(g, &c)?, k(g, &m)?);
        feature_kl(g, x, t, mv)
    })?;
    Ok(s.results)
}

/// Attention, transformer blocks, the sampler's probability path and the
/// generation losses.
pub fn composite_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut s = Suite {
        results: Vec::new(),
    };
    let cfg = AttentionConfig::new(8, 2)?;
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut store, &mut rng, "attn", cfg);
    let enc = EncoderLayer::new(&mut store, &mut rng, "enc", cfg, 16);
    let dec = DecoderBlock::new(&mut store, &mut rng, "dec", cfg, 16);
    let scs = ScsParams::new(&mut store, &mut rng, "scs", 8);
    let gen = GeneratorParams::new(&mut store, &mut rng, "gen", cfg, 16, 1, 3, 6);
    let q = random(&mut rng, &[3, 8], -1.0, 1.0);
    let kv = random(&mut rng, &[5, 8], -1.0, 1.0);
    let vis = random(&mut rng, &[3, 8], -1.0, 1.0);
    let mut mask = Tensor::zeros(&[3, 5]);
    for r in 0..3 {
        mask.data_mut()[r * 5 + 1] = f64::NEG_INFINITY;
        mask.data_mut()[r * 5 + 4] = f64::NEG_INFINITY;
    }
    let st = &store;
    s.composite("attention (queries)", &q, |g, x| {
        let mut sess = Session::eval(g, st);
        let kvv = sess.graph.constant(kv.clone())?;
        attn.forward(&mut sess, x, kvv, Some(&mask))
    })?;
    s.composite("attention (keys/values)", &kv, |g, x| {
        let mut sess = Session::eval(g, st);
        let qv = sess.graph.constant(q.clone())?;
        attn.forward(&mut sess, qv, x, Some(&mask))
    })?;
    s.composite("encoder layer", &kv, |g, x| {
        enc.forward(&mut Session::eval(g, st), x)
    })?;
    s.composite("hybrid extraction", &kv, |g, x| {
        let mut sess = Session::eval(g, st);
        let extra = sess.graph.constant(vis.clone())?;
        enc.forward_hybrid(&mut sess, x, Some(extra))
    })?;
    s.composite("decoder block (memory)", &kv, |g, x| {
        let mut sess = Session::eval(g, st);
        let qv = sess.graph.constant(q.clone())?;
        dec.forward(&mut sess, qv, x, Some(&mask))
    })?;
    s.composite("sampler keep probabilities", &kv, |g, x| {
        let mut sess = Session::eval(g, st);
        let prev = LayerMask::constant(
            sess.graph,
            MaskVector::new(vec![true, true, false, true, true]),
        )?;
        Ok(scs_forward(&mut sess, &scs, x, &prev, None, 1.0)?.keep_probs)
    })?;
    let m_t = MaskVector::new(vec![false, true, true, false, false]);
    let m_v = MaskVector::new(vec![true, false, true]);
    let gen_loss = |g: &mut Graph, text: Var, visual: Var| -> Result<Var> {
        let mut sess = Session::eval(g, st);
        let mt = LayerMask::constant(sess.graph, m_t.clone())?;
        let mv = LayerMask::constant(sess.graph, m_v.clone())?;
        let out = forward_generation(&mut sess, &gen, text, Some(visual), &mt, Some(&mv), true)?;
        let r = out.recon_loss.expect("recon present");
        let c = out.cycle_loss.expect("cycle present");
        sess.graph.add(r, c)
    };
    s.composite("generation losses (text)", &kv, |g, x| {
        let v = g.constant(vis.clone())?;
        gen_loss(g, x, v)
    })?;
    s.composite("generation losses (visual)", &vis, |g, x| {
        let t = g.constant(kv.clone())?;
        gen_loss(g, t, x)
    })?;
    Ok(s.results)
}

/// A tiny model, `d=8, h=2, N=2`, two sentences of which one has an image.
pub fn tiny_model(seed: u64) -> Result<(BgaModel, Vec<PairedExample>)> {
    let vocab = Vocab::from((0..10).map(|i| format!("w{i}")).collect::<Vec<_>>());
    let config = ModelConfig {
        d: 8,
        heads: 2,
        layers: 2,
        num_patches: 3,
        max_len: 5,
        raw_dim: 4,
        vocab_size: vocab.len(),
        entity_types: vec!["A".into(), "B".into()],
        alpha: 1.0,
        dropout: 0.0,
        seed,
        ..ModelConfig::default()
    };
    let model = BgaModel::new(config, vocab)?;
    let mut rng = Rng::seed_from_u64(seed ^ 0x5eed);
    let examples = vec![
        PairedExample {
            ids: vec![4, 5, 6, 7, 8],
            tags: vec![1, 2, 0, 3, 0],
            patches: Some(random(&mut rng, &[3, 4], -1.0, 1.0)),
            has_image: true,
        },
        PairedExample {
            ids: vec![9, 4, 5],
            tags: vec![0, 3, 4],
            patches: None,
            has_image: false,
        },
    ];
    Ok((model, examples))
}

/// Gradient of the overall training objective with respect to every
/// parameter tensor of the tiny model (up to `per_tensor` sampled
/// coordinates each), with deterministic sampling.
pub fn end_to_end_check(seed: u64, per_tensor: usize) -> Result<CheckResult> {
    let (model, examples) = tiny_model(seed)?;
    let batch: Vec<&PairedExample> = examples.iter().collect();
    let mut rng = Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for id in model.store.ids() {
        let value = model.store.value(id);
        let coords: Vec<usize> = if value.numel() <= per_tensor {
            (0..value.numel()).collect()
        } else {
            (0..per_tensor)
                .map(|_| rng.random_range(0..value.numel()))
                .collect()
        };
        let err = finite_difference_check_at(
            |g, x| {
                g.bind_param(id, x);
                let mut sess = Session::eval(g, &model.store);
                Ok(model.forward_batch(&mut sess, &batch)?.loss)
            },
            value,
            COMPOSITE_EPS,
            &coords,
        )?;
        worst = worst.max(err);
    }
    Ok(CheckResult {
        name: "end-to-end model (d=8, h=2, N=2)".into(),
        max_rel_error: worst,
        tolerance: COMPOSITE_TOLERANCE,
    })
}

pub fn run_gradient_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = leaf_checks(seed)?;
    out.extend(composite_checks(seed)?);
    out.push(end_to_end_check(seed, 4)?);
    Ok(out)
}
