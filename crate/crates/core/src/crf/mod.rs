//! Linear-chain CRF: log-partition by the forward algorithm, negative
//! log-likelihood with exact marginal gradients, Viterbi decoding, and
//! brute-force enumeration oracles.
//!
//! A label sequence `y` over `n` positions scores
//! `start[y₀] + Σᵢ emit[i][yᵢ] + Σᵢ trans[yᵢ₋₁][yᵢ]`.

mod bio;
mod metrics;

pub use bio::{bio_spans, validate_bio, LabelSet, Span};
pub use metrics::{span_counts, span_micro_f1, Counts, Prf};

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Graph, ParamId, ParamStore, Tensor, Var};

/// Largest enumeration the brute-force oracles accept.
pub const BRUTE_FORCE_LIMIT: usize = 1_000_000;

/// Transition and start scores, as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfWeights {
    /// `L×L`, entry `(i, j)` scores label `i` followed by label `j`.
    pub transitions: Tensor,
    /// `[L]`.
    pub start: Tensor,
}

impl CrfWeights {
    pub fn new(transitions: Tensor, start: Tensor) -> Result<Self> {
        let l = start.numel();
        if l == 0 || transitions.shape() != [l, l] || start.shape() != [l] {
            return Err(Error::Shape {
                op: "crf_weights",
                lhs: transitions.shape().to_vec(),
                rhs: start.shape().to_vec(),
            });
        }
        if !transitions.all_finite() || !start.all_finite() {
            return Err(Error::NonFinite { op: "crf_weights" });
        }
        Ok(Self { transitions, start })
    }

    pub fn zeros(labels: usize) -> Self {
        Self {
            transitions: Tensor::zeros(&[labels, labels]),
            start: Tensor::zeros(&[labels]),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.start.numel()
    }

    fn trans(&self, from: usize, to: usize) -> f64 {
        self.transitions.data()[from * self.num_labels() + to]
    }
}

/// Trainable CRF parameters.
#[derive(Clone, Debug)]
pub struct CrfParams {
    pub transitions: ParamId,
    pub start: ParamId,
    pub num_labels: usize,
}

impl CrfParams {
    pub fn new(store: &mut ParamStore, name: &str, labels: usize) -> Self {
        Self {
            transitions: store.add_zeros(format!("{name}.transitions"), &[labels, labels]),
            start: store.add_zeros(format!("{name}.start"), &[labels]),
            num_labels: labels,
        }
    }

    pub fn weights(&self, store: &ParamStore) -> CrfWeights {
        CrfWeights {
            transitions: store.value(self.transitions).clone(),
            start: store.value(self.start).clone(),
        }
    }
}

fn check_emissions(emissions: &Tensor, w: &CrfWeights) -> Result<(usize, usize)> {
    let l = w.num_labels();
    if emissions.shape().len() != 2 || emissions.cols() != l {
        return Err(Error::Shape {
            op: "crf",
            lhs: emissions.shape().to_vec(),
            rhs: vec![l],
        });
    }
    if emissions.rows() == 0 {
        return Err(Error::Empty("crf emissions"));
    }
    Ok((emissions.rows(), l))
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Forward (`alpha`) and backward (`beta`) log-messages plus `log Z`.
struct Lattice {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    log_z: f64,
}

fn lattice(em: &Tensor, w: &CrfWeights, with_beta: bool) -> Lattice {
    let (n, l) = (em.rows(), w.num_labels());
    let mut alpha = vec![0.0; n * l];
    for j in 0..l {
        alpha[j] = w.start.data()[j] + em.get(0, j);
    }
    for i in 1..n {
        for j in 0..l {
            let prev = &alpha[(i - 1) * l..i * l];
            alpha[i * l + j] = log_sum_exp((0..l).map(|k| prev[k] + w.trans(k, j))) + em.get(i, j);
        }
    }
    let log_z = log_sum_exp(alpha[(n - 1) * l..].iter().copied());
    let mut beta = Vec::new();
    if with_beta {
        beta = vec![0.0; n * l];
        for i in (0..n - 1).rev() {
            for k in 0..l {
                let next = &beta[(i + 1) * l..(i + 2) * l];
                beta[i * l + k] =
                    log_sum_exp((0..l).map(|j| w.trans(k, j) + em.get(i + 1, j) + next[j]));
            }
        }
    }
    Lattice { alpha, beta, log_z }
}

/// Expected feature counts under the CRF distribution:
/// `(d logZ/d emissions, d logZ/d transitions, d logZ/d start)`.
fn marginals(em: &Tensor, w: &CrfWeights) -> (Tensor, Tensor, Tensor) {
    let (n, l) = (em.rows(), w.num_labels());
    let lat = lattice(em, w, true);
    let mut unary = Tensor::zeros(&[n, l]);
    for i in 0..n {
        for j in 0..l {
            unary.data_mut()[i * l + j] =
                (lat.alpha[i * l + j] + lat.beta[i * l + j] - lat.log_z).exp();
        }
    }
    let mut pair = Tensor::zeros(&[l, l]);
    for i in 0..n.saturating_sub(1) {
        for k in 0..l {
            for j in 0..l {
                let s = lat.alpha[i * l + k]
                    + w.trans(k, j)
                    + em.get(i + 1, j)
                    + lat.beta[(i + 1) * l + j];
                pair.data_mut()[k * l + j] += (s - lat.log_z).exp();
            }
        }
    }
    let start = Tensor::vector(unary.row(0).to_vec());
    (unary, pair, start)
}

/// `log Σ_y exp(score(y))` over all `Lⁿ` label sequences.
pub fn crf_log_partition(emissions: &Tensor, w: &CrfWeights) -> Result<f64> {
    check_emissions(emissions, w)?;
    Ok(lattice(emissions, w, false).log_z)
}

fn check_tags(tags: &[usize], n: usize, l: usize) -> Result<()> {
    if tags.len() != n {
        return Err(Error::Shape {
            op: "crf_tags",
            lhs: vec![tags.len()],
            rhs: vec![n],
        });
    }
    if let Some(&t) = tags.iter().find(|&&t| t >= l) {
        return Err(Error::invalid(format!(
            "tag index {t} out of range for {l} labels"
        )));
    }
    Ok(())
}

/// Unnormalized log-score of one label sequence.
pub fn sequence_score(emissions: &Tensor, w: &CrfWeights, tags: &[usize]) -> Result<f64> {
    let (n, l) = check_emissions(emissions, w)?;
    check_tags(tags, n, l)?;
    let mut s = w.start.data()[tags[0]] + emissions.get(0, tags[0]);
    for i in 1..n {
        s += w.trans(tags[i - 1], tags[i]) + emissions.get(i, tags[i]);
    }
    Ok(s)
}

/// `−log p(tags)`: log-partition minus the sequence score, floored at 0 so
/// rounding never reports a probability above one.
pub fn crf_nll(emissions: &Tensor, w: &CrfWeights, tags: &[usize]) -> Result<f64> {
    let score = sequence_score(emissions, w, tags)?;
    Ok((crf_log_partition(emissions, w)? - score).max(0.0))
}

fn for_each_sequence(n: usize, l: usize, mut f: impl FnMut(&[usize])) {
    let mut seq = vec![0usize; n];
    loop {
        f(&seq);
        let mut i = n;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            seq[i] += 1;
            if seq[i] < l {
                break;
            }
            seq[i] = 0;
        }
    }
}

fn check_enumerable(n: usize, l: usize) -> Result<()> {
    let total = (l as f64).powi(n as i32);
    if total > BRUTE_FORCE_LIMIT as f64 {
        return Err(Error::TooLarge { labels: l, len: n });
    }
    Ok(())
}

/// Log-partition by explicit enumeration of every label sequence.
pub fn brute_force_log_partition(emissions: &Tensor, w: &CrfWeights) -> Result<f64> {
    let (n, l) = check_emissions(emissions, w)?;
    check_enumerable(n, l)?;
    let mut scores = Vec::with_capacity(l.pow(n as u32));
    for_each_sequence(n, l, |seq| {
        scores.push(sequence_score(emissions, w, seq).expect("valid sequence"))
    });
    Ok(log_sum_exp(scores.iter().copied()))
}

/// Highest-scoring sequence by enumeration; the first maximum in
/// lexicographic order wins ties.
pub fn brute_force_best(emissions: &Tensor, w: &CrfWeights) -> Result<(Vec<usize>, f64)> {
    let (n, l) = check_emissions(emissions, w)?;
    check_enumerable(n, l)?;
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    for_each_sequence(n, l, |seq| {
        let s = sequence_score(emissions, w, seq).expect("valid sequence");
        if s > best.1 {
            best = (seq.to_vec(), s);
        }
    });
    Ok(best)
}

/// Max-product decoding. Ties go to the lowest label index, both for the
/// final label and at every backtrack step.
pub fn viterbi_decode(emissions: &Tensor, w: &CrfWeights) -> Result<(Vec<usize>, f64)> {
    let (n, l) = check_emissions(emissions, w)?;
    let mut delta: Vec<f64> = (0..l)
        .map(|j| w.start.data()[j] + emissions.get(0, j))
        .collect();
    let mut back = vec![0usize; n * l];
    for i in 1..n {
        let mut next = vec![0.0; l];
        for j in 0..l {
            let mut best_k = 0;
            let mut best = delta[0] + w.trans(0, j);
            for k in 1..l {
                let s = delta[k] + w.trans(k, j);
                if s > best {
                    best = s;
                    best_k = k;
                }
            }
            back[i * l + j] = best_k;
            next[j] = best + emissions.get(i, j);
        }
        delta = next;
    }
    let mut last = 0;
    for j in 1..l {
        if delta[j] > delta[last] {
            last = j;
        }
    }
    let score = delta[last];
    let mut path = vec![last; n];
    for i in (1..n).rev() {
        path[i - 1] = back[i * l + path[i]];
    }
    Ok((path, score))
}

struct LogPartitionOp;

impl CustomOp for LogPartitionOp {
    fn name(&self) -> &'static str {
        "crf_log_partition"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Tensor> {
        let w = CrfWeights {
            transitions: inputs[1].clone(),
            start: inputs[2].clone(),
        };
        let (mut ge, mut gt, mut gs) = marginals(inputs[0], &w);
        let g = grad_out.item();
        for t in [&mut ge, &mut gt, &mut gs] {
            t.data_mut().iter_mut().for_each(|v| *v *= g);
        }
        vec![ge, gt, gs]
    }
}

struct NllOp {
    tags: Vec<usize>,
}

impl CustomOp for NllOp {
    fn name(&self) -> &'static str {
        "crf_nll"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Tensor> {
        let w = CrfWeights {
            transitions: inputs[1].clone(),
            start: inputs[2].clone(),
        };
        let l = w.num_labels();
        let (mut ge, mut gt, mut gs) = marginals(inputs[0], &w);
        for (i, &t) in self.tags.iter().enumerate() {
            ge.data_mut()[i * l + t] -= 1.0;
            if i > 0 {
                gt.data_mut()[self.tags[i - 1] * l + t] -= 1.0;
            }
        }
        gs.data_mut()[self.tags[0]] -= 1.0;
        let g = grad_out.item();
        for t in [&mut ge, &mut gt, &mut gs] {
            t.data_mut().iter_mut().for_each(|v| *v *= g);
        }
        vec![ge, gt, gs]
    }
}

fn graph_weights(g: &Graph, transitions: Var, start: Var) -> Result<CrfWeights> {
    CrfWeights::new(g.value(transitions).clone(), g.value(start).clone())
}

/// Differentiable log-partition.
pub fn log_partition_op(
    g: &mut Graph,
    emissions: Var,
    transitions: Var,
    start: Var,
) -> Result<Var> {
    let w = graph_weights(g, transitions, start)?;
    let z = crf_log_partition(g.value(emissions), &w)?;
    g.custom(
        &[emissions, transitions, start],
        Tensor::scalar(z),
        Box::new(LogPartitionOp),
    )
}

/// Differentiable negative log-likelihood of `tags`.
pub fn nll_op(
    g: &mut Graph,
    emissions: Var,
    transitions: Var,
    start: Var,
    tags: &[usize],
) -> Result<Var> {
    let w = graph_weights(g, transitions, start)?;
    let nll = crf_nll(g.value(emissions), &w, tags)?;
    g.custom(
        &[emissions, transitions, start],
        Tensor::scalar(nll),
        Box::new(NllOp {
            tags: tags.to_vec(),
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;
    use rand::{Rng as _, SeedableRng};

    fn random_instance(rng: &mut crate::tensor::Rng, n: usize, l: usize) -> (Tensor, CrfWeights) {
        let mut r = |k: usize| {
            (0..k)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect::<Vec<f64>>()
        };
        let em = Tensor::matrix(n, l, r(n * l)).unwrap();
        let w = CrfWeights::new(
            Tensor::matrix(l, l, r(l * l)).unwrap(),
            Tensor::vector(r(l)),
        )
        .unwrap();
        (em, w)
    }

    #[test]
    fn single_position_partition_is_log_sum_exp() {
        let (a, b) = (0.3f64, -1.1f64);
        let em = Tensor::matrix(1, 2, vec![a, b]).unwrap();
        let z = crf_log_partition(&em, &CrfWeights::zeros(2)).unwrap();
        assert!((z - (a.exp() + b.exp()).ln()).abs() < 1e-14);
        let nll = crf_nll(&em, &CrfWeights::zeros(2), &[0]).unwrap();
        assert!((nll - (-a + (a.exp() + b.exp()).ln())).abs() < 1e-14);
    }

    #[test]
    fn uniform_scores_count_sequences() {
        let em = Tensor::zeros(&[3, 4]);
        let z = crf_log_partition(&em, &CrfWeights::zeros(4)).unwrap();
        assert!((z - 3.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_and_oversized_inputs_are_rejected() {
        let w = CrfWeights::zeros(3);
        assert!(matches!(
            crf_log_partition(&Tensor::zeros(&[0, 3]), &w),
            Err(Error::Empty(_))
        ));
        assert!(matches!(
            viterbi_decode(&Tensor::zeros(&[0, 3]), &w),
            Err(Error::Empty(_))
        ));
        let big = Tensor::zeros(&[7, 10]);
        assert!(matches!(
            brute_force_log_partition(&big, &CrfWeights::zeros(10)),
            Err(Error::TooLarge { .. })
        ));
        assert!(crf_nll(&Tensor::zeros(&[2, 3]), &w, &[0, 3]).is_err());
    }

    #[test]
    fn single_label_has_zero_nll() {
        let em = Tensor::matrix(4, 1, vec![0.5, -2.0, 1.0, 3.0]).unwrap();
        let w = CrfWeights::new(
            Tensor::matrix(1, 1, vec![0.7]).unwrap(),
            Tensor::vector(vec![-0.2]),
        )
        .unwrap();
        assert!(crf_nll(&em, &w, &[0, 0, 0, 0]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn viterbi_tie_rule_prefers_label_zero() {
        let (path, _) = viterbi_decode(&Tensor::zeros(&[5, 4]), &CrfWeights::zeros(4)).unwrap();
        assert_eq!(path, vec![0; 5]);
    }

    #[test]
    fn viterbi_follows_a_dominant_diagonal() {
        let l = 4;
        let mut trans = Tensor::full(&[l, l], -5.0);
        for i in 0..l {
            trans.data_mut()[i * l + i] = 5.0;
        }
        let mut em = Tensor::zeros(&[6, l]);
        em.data_mut()[2] = 10.0;
        let w = CrfWeights::new(trans, Tensor::zeros(&[l])).unwrap();
        let (path, _) = viterbi_decode(&em, &w).unwrap();
        assert_eq!(path, vec![2; 6]);
    }

    #[test]
    fn forward_and_viterbi_match_enumeration() {
        let mut rng = crate::tensor::Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(1..=6);
            let l = rng.random_range(1..=5);
            let (em, w) = random_instance(&mut rng, n, l);
            let z = crf_log_partition(&em, &w).unwrap();
            let zb = brute_force_log_partition(&em, &w).unwrap();
            assert!((z - zb).abs() <= 1e-10, "{z} vs {zb}");
            let (path, score) = viterbi_decode(&em, &w).unwrap();
            let (_, best) = brute_force_best(&em, &w).unwrap();
            assert!((score - best).abs() <= 1e-10);
            assert!((sequence_score(&em, &w, &path).unwrap() - best).abs() <= 1e-10);
            assert!(z >= best - 1e-12);
        }
    }

    #[test]
    fn nll_gradients_match_finite_differences() {
        let mut rng = crate::tensor::Rng::seed_from_u64(5);
        for _ in 0..5 {
            let n = rng.random_range(1..=5);
            let l = rng.random_range(2..=4);
            let (em, w) = random_instance(&mut rng, n, l);
            let tags: Vec<usize> = (0..n).map(|_| rng.random_range(0..l)).collect();
            let wt = w.clone();
            let tg = tags.clone();
            let err = finite_difference_check(
                move |g, x| {
                    let t = g.constant(wt.transitions.clone())?;
                    let s = g.constant(wt.start.clone())?;
                    nll_op(g, x, t, s, &tg)
                },
                &em,
                1e-6,
            )
            .unwrap();
            assert!(err <= 1e-5, "emission grad error {err}");
            let em2 = em.clone();
            let start = w.start.clone();
            let err = finite_difference_check(
                move |g, x| {
                    let e = g.constant(em2.clone())?;
                    let s = g.constant(start.clone())?;
                    log_partition_op(g, e, x, s)
                },
                &w.transitions,
                1e-6,
            )
            .unwrap();
            assert!(err <= 1e-5, "transition grad error {err}");
        }
    }
}
