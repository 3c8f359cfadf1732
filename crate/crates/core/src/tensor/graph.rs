use std::collections::HashMap;
use std::fmt;

use super::{gemm, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward rule for an operation defined outside this module.
///
/// `backward` returns one gradient per input, in input order, each with the
/// input's shape.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    DivScalar(Var, Var),
    ClampMin(Var, f64),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    BroadcastRows(Var),
    Index(Var, usize),
    Sum(Var),
    MeanRows(Var),
    KlRows(Var, Var),
    StraightThrough(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Probability floor applied before logarithms in KL terms.
pub const KL_FLOOR: f64 = 1e-12;

const LN_EPS: f64 = 1e-5;

/// Recorded computation. Nodes are appended in execution order, so every
/// node's inputs precede it and the tape is topologically sorted by
/// construction.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("params", &self.bound.len())
            .finish()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape().len() == 2
}

fn softmax_rows(x: &[f64], cols: usize, out: &mut [f64]) -> Result<()> {
    for (r, (xr, or)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateAxis { row: r });
        }
        let mut total = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = if v == f64::NEG_INFINITY {
                0.0
            } else {
                (v - max).exp()
            };
            total += *o;
        }
        for o in or.iter_mut() {
            *o /= total;
        }
    }
    Ok(())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf. Values must be finite.
    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "variable" });
        }
        Ok(self.leaf(value, true))
    }

    /// Non-differentiable leaf. `-inf` is permitted (additive masks); NaN is not.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        if value
            .data()
            .iter()
            .any(|v| v.is_nan() || *v == f64::INFINITY)
        {
            return Err(Error::NonFinite { op: "constant" });
        }
        Ok(self.leaf(value, false))
    }

    /// Binds a stored parameter into the graph, once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), true);
        self.bound.insert(id, v);
        v
    }

    /// Makes `id` resolve to an existing variable instead of the stored value.
    pub fn bind_param(&mut self, id: ParamId, v: Var) {
        self.bound.insert(id, v);
    }

    /// Adds the gradients of every bound parameter into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&id, &v) in &self.bound {
            if let Some(g) = &self.nodes[v.0].grad {
                store.grad_mut(id).add_assign(g);
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an externally defined operation whose forward value has
    /// already been computed.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let name = op.name();
        self.push(value, Op::Custom(inputs.to_vec(), op), inputs, name)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_matrix(ta) || !is_matrix(tb) || ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            ta.data(),
            false,
            tb.data(),
            false,
            out.data_mut(),
            false,
        );
        self.push(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_matrix(ta) || !is_matrix(tb) || ta.cols() != tb.cols() {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            ta.data(),
            false,
            tb.data(),
            true,
            out.data_mut(),
            false,
        );
        self.push(out, Op::MatMulNT(a, b), &[a, b], "matmul_nt")
    }

    fn zip_with(
        &self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    /// `x[m×n] + b` with `b` of `n` entries broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if !is_matrix(tx) || tb.numel() != tx.cols() {
            return Err(shape_err("add_row", tx, tb));
        }
        let n = tx.cols();
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRow(x, b), &[x, b], "add_row")
    }

    /// Multiplies row `i` of `x[m×n]` by `w[i]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if !is_matrix(tx) || tw.numel() != tx.rows() {
            return Err(shape_err("scale_rows", tx, tw));
        }
        let n = tx.cols();
        let mut out = tx.clone();
        for (row, &s) in out.data_mut().chunks_mut(n).zip(tw.data()) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        self.push(out, Op::ScaleRows(x, w), &[x, w], "scale_rows")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push(out, Op::Scale(x, c), &[x], "scale")
    }

    /// Divides every entry of `x` by the scalar `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if ts.numel() != 1 {
            return Err(shape_err("div_scalar", tx, ts));
        }
        let d = ts.item();
        let mut out = tx.clone();
        out.data_mut().iter_mut().for_each(|v| *v /= d);
        self.push(out, Op::DivScalar(x, s), &[x, s], "div_scalar")
    }

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(floor));
        self.push(out, Op::ClampMin(x, floor), &[x], "clamp_min")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if !is_matrix(tx) {
            return Err(shape_err("transpose", tx, tx));
        }
        let (m, n) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = tx.data()[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        self.push(out, Op::Transpose(x), &[x], "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push(out, Op::Reshape(x), &[x], "reshape")
    }

    /// Softmax along the last axis. Entries equal to `-inf` map to exactly 0.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let mut out = Tensor::zeros(tx.shape());
        softmax_rows(tx.data(), tx.cols(), out.data_mut())?;
        self.push(out, Op::Softmax(x), &[x], "softmax")
    }

    /// Softmax of `x + mask` along the last axis, where `mask` holds 0 or `-inf`.
    pub fn softmax_masked(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != mask.shape() {
            return Err(shape_err("softmax_masked", tx, mask));
        }
        let logits: Vec<f64> = tx
            .data()
            .iter()
            .zip(mask.data())
            .map(|(a, m)| a + m)
            .collect();
        let mut out = Tensor::zeros(tx.shape());
        softmax_rows(&logits, tx.cols(), out.data_mut())?;
        self.push(out, Op::Softmax(x), &[x], "softmax")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        self.push(out, Op::Gelu(x), &[x], "gelu")
    }

    /// Per-row normalization to zero mean and unit variance, then affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        if !is_matrix(tx) || tg.numel() != tx.cols() || tb.numel() != tx.cols() {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let n = tx.cols();
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = Vec::with_capacity(tx.rows());
        let mut out = Tensor::zeros(tx.shape());
        for (r, row) in tx.data().chunks(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out.data_mut()[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        self.push(out, op, &[x, gamma, beta], "layer_norm")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat_rows"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if !is_matrix(t) || t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat_cols"))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if !is_matrix(t) || t.rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), t));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if !is_matrix(tx) || start + len > tx.rows() || len == 0 {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: tx.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let c = tx.cols();
        let out = Tensor::new(
            vec![len, c],
            tx.data()[start * c..(start + len) * c].to_vec(),
        )?;
        self.push(out, Op::SliceRows(x, start), &[x], "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if !is_matrix(tx) || start + len > tx.cols() || len == 0 {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: tx.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(tx.rows() * len);
        for r in 0..tx.rows() {
            data.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![tx.rows(), len], data)?;
        self.push(out, Op::SliceCols(x, start), &[x], "slice_cols")
    }

    /// Row lookup `table[ids[i]]`, the embedding primitive.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if !is_matrix(tt) || ids.is_empty() {
            return Err(Error::Empty("gather_rows"));
        }
        let c = tt.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= tt.rows() {
                return Err(Error::UnknownId {
                    id: i,
                    vocab: tt.rows(),
                });
            }
            data.extend_from_slice(tt.row(i));
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        self.push(
            out,
            Op::GatherRows(table, ids.to_vec()),
            &[table],
            "gather_rows",
        )
    }

    /// Repeats a single row `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rows() != 1 || rows == 0 {
            return Err(shape_err("broadcast_rows", tx, tx));
        }
        let row = tx.data().to_vec();
        let c = row.len();
        let out = Tensor::new(vec![rows, c], row.repeat(rows))?;
        self.push(out, Op::BroadcastRows(x), &[x], "broadcast_rows")
    }

    /// Scalar at flat position `i`.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let tx = self.value(x);
        if i >= tx.numel() {
            return Err(Error::Shape {
                op: "index",
                lhs: tx.shape().to_vec(),
                rhs: vec![i],
            });
        }
        let out = Tensor::scalar(tx.data()[i]);
        self.push(out, Op::Index(x, i), &[x], "index")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(out, Op::Sum(x), &[x], "sum")
    }

    /// Column means: `[m×n] → [1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if !is_matrix(tx) || tx.rows() == 0 {
            return Err(shape_err("mean_rows", tx, tx));
        }
        let (m, n) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; n];
        for row in tx.data().chunks(n) {
            for (d, v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|v| *v /= m as f64);
        let out = Tensor::new(vec![1, n], data)?;
        self.push(out, Op::MeanRows(x), &[x], "mean_rows")
    }

    /// Row-wise `KL(p_i ‖ q_i)` with probabilities floored at [`KL_FLOOR`]
    /// inside the logarithms. Matrices give one value per row; vectors give
    /// a scalar.
    pub fn kl_rows(&mut self, p: Var, q: Var) -> Result<Var> {
        let (tp, tq) = (self.value(p), self.value(q));
        if tp.shape() != tq.shape() || tp.shape().is_empty() || tp.shape().len() > 2 {
            return Err(shape_err("kl_rows", tp, tq));
        }
        let c = tp.cols();
        let vals: Vec<f64> = tp
            .data()
            .chunks(c)
            .zip(tq.data().chunks(c))
            .map(|(pr, qr)| {
                pr.iter()
                    .zip(qr)
                    .map(|(&a, &b)| a * (a.max(KL_FLOOR).ln() - b.max(KL_FLOOR).ln()))
                    .sum()
            })
            .collect();
        let out = if tp.shape().len() == 1 {
            Tensor::scalar(vals[0])
        } else {
            Tensor::vector(vals)
        };
        self.push(out, Op::KlRows(p, q), &[p, q], "kl_rows")
    }

    /// Forward value is the row-wise one-hot argmax of `x` (first index wins
    /// ties); the backward pass treats the op as the identity.
    pub fn straight_through(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if !is_matrix(tx) {
            return Err(shape_err("straight_through", tx, tx));
        }
        let c = tx.cols();
        let mut out = Tensor::zeros(tx.shape());
        for (r, row) in tx.data().chunks(c).enumerate() {
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            out.data_mut()[r * c + best] = 1.0;
        }
        self.push(out, Op::StraightThrough(x), &[x], "straight_through")
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate on leaves
    /// across repeated calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0];
        if !lv.value.is_scalar() {
            return Err(Error::NonScalarLoss(lv.value.shape().to_vec()));
        }
        if !lv.requires_grad {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.requires_grad(*a) {
                    let mut ga = Tensor::zeros(ta.shape());
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        false,
                        tb.data(),
                        true,
                        ga.data_mut(),
                        false,
                    );
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = Tensor::zeros(tb.shape());
                    gemm(
                        k,
                        m,
                        n,
                        ta.data(),
                        true,
                        g.data(),
                        false,
                        gb.data_mut(),
                        false,
                    );
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.requires_grad(*a) {
                    let mut ga = Tensor::zeros(ta.shape());
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        false,
                        tb.data(),
                        false,
                        ga.data_mut(),
                        false,
                    );
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = Tensor::zeros(tb.shape());
                    gemm(
                        n,
                        m,
                        k,
                        g.data(),
                        true,
                        ta.data(),
                        false,
                        gb.data_mut(),
                        false,
                    );
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let mut gb = g.clone();
                gb.data_mut().iter_mut().for_each(|v| *v = -*v);
                self.accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga: Vec<f64> = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), ga).unwrap());
                self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), gb).unwrap());
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*b) {
                    let tb = self.value(*b);
                    let n = tb.numel();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), gb).unwrap());
                }
            }
            Op::ScaleRows(x, w) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let n = tx.cols();
                if self.requires_grad(*x) {
                    let mut gx = g.clone();
                    for (row, &s) in gx.data_mut().chunks_mut(n).zip(tw.data()) {
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.requires_grad(*w) {
                    let gw: Vec<f64> = g
                        .data()
                        .chunks(n)
                        .zip(tx.data().chunks(n))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *w, Tensor::new(tw.shape().to_vec(), gw).unwrap());
                }
            }
            Op::Scale(x, c) => {
                let mut gx = g.clone();
                gx.data_mut().iter_mut().for_each(|v| *v *= c);
                self.accumulate(grads, *x, gx);
            }
            Op::DivScalar(x, s) => {
                let d = self.value(*s).item();
                if self.requires_grad(*x) {
                    let mut gx = g.clone();
                    gx.data_mut().iter_mut().for_each(|v| *v /= d);
                    self.accumulate(grads, *x, gx);
                }
                if self.requires_grad(*s) {
                    // d(x/s)/ds = -x/s² = -out/s
                    let gs: f64 = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(a, o)| -a * o / d)
                        .sum();
                    let shape = self.value(*s).shape().to_vec();
                    self.accumulate(grads, *s, Tensor::new(shape, vec![gs]).unwrap());
                }
            }
            Op::ClampMin(x, floor) => {
                let tx = self.value(*x);
                let gx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(a, &v)| if v > *floor { *a } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), gx).unwrap());
            }
            Op::Transpose(x) => {
                let (m, n) = (out.rows(), out.cols());
                let mut data = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        data[c * m + r] = g.data()[r * n + c];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![n, m], data).unwrap());
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshaped(shape).unwrap());
            }
            Op::Softmax(x) => {
                let c = out.cols();
                let mut gx = Tensor::zeros(out.shape());
                for ((gr, yr), dr) in g
                    .data()
                    .chunks(c)
                    .zip(out.data().chunks(c))
                    .zip(gx.data_mut().chunks_mut(c))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let gx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(a, &v)| a * gelu_grad(v))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), gx).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let tg = self.value(*gamma);
                let n = tg.numel();
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut gg = vec![0.0; n];
                    let mut gb = vec![0.0; n];
                    for (gr, hr) in g.data().chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                            gb[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::new(tg.shape().to_vec(), gg).unwrap());
                    let bs = self.value(*beta).shape().to_vec();
                    self.accumulate(grads, *beta, Tensor::new(bs, gb).unwrap());
                }
                if self.requires_grad(*x) {
                    let mut gx = Tensor::zeros(out.shape());
                    for (r, (gr, hr)) in g.data().chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let gh: Vec<f64> = gr.iter().zip(tg.data()).map(|(a, b)| a * b).collect();
                        let mean_gh = gh.iter().sum::<f64>() / n as f64;
                        let mean_ghh =
                            gh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gx.data_mut()[r * n + j] =
                                inv_std[r] * (gh[j] - mean_gh - hr[j] * mean_ghh);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::ConcatRows(parts) => {
                let c = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let slice = g.data()[offset * c..(offset + rows) * c].to_vec();
                    self.accumulate(grads, p, Tensor::new(vec![rows, c], slice).unwrap());
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let w = tp.cols();
                    let mut data = Vec::with_capacity(tp.numel());
                    for r in 0..tp.rows() {
                        data.extend_from_slice(
                            &g.data()[r * total + offset..r * total + offset + w],
                        );
                    }
                    self.accumulate(grads, p, Tensor::new(tp.shape().to_vec(), data).unwrap());
                    offset += w;
                }
            }
            Op::SliceRows(x, start) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut gx = Tensor::zeros(tx.shape());
                gx.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *x, gx);
            }
            Op::SliceCols(x, start) => {
                let tx = self.value(*x);
                let (c, w) = (tx.cols(), out.cols());
                let mut gx = Tensor::zeros(tx.shape());
                for r in 0..tx.rows() {
                    gx.data_mut()[r * c + start..r * c + start + w]
                        .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GatherRows(table, ids) => {
                let tt = self.value(*table);
                let c = tt.cols();
                let mut gt = Tensor::zeros(tt.shape());
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        gt.data_mut()[id * c + j] += g.data()[r * c + j];
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::BroadcastRows(x) => {
                let tx = self.value(*x);
                let c = tx.numel();
                let mut data = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (d, v) in data.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), data).unwrap());
            }
            Op::Index(x, idx) => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                gx.data_mut()[*idx] = g.item();
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), g.item()));
            }
            Op::MeanRows(x) => {
                let tx = self.value(*x);
                let m = tx.rows() as f64;
                let row: Vec<f64> = g.data().iter().map(|v| v / m).collect();
                let data = row.repeat(tx.rows());
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), data).unwrap());
            }
            Op::KlRows(p, q) => {
                let (tp, tq) = (self.value(*p), self.value(*q));
                let c = tp.cols();
                let mut gp = Tensor::zeros(tp.shape());
                let mut gq = Tensor::zeros(tq.shape());
                for r in 0..tp.numel() / c {
                    let gr = g.data()[r];
                    for j in 0..c {
                        let k = r * c + j;
                        let (a, b) = (tp.data()[k], tq.data()[k]);
                        let (la, lb) = (a.max(KL_FLOOR).ln(), b.max(KL_FLOOR).ln());
                        let dla = if a > KL_FLOOR { 1.0 } else { 0.0 };
                        gp.data_mut()[k] = gr * (la - lb + dla);
                        gq.data_mut()[k] = if b > KL_FLOOR { -gr * a / b } else { 0.0 };
                    }
                }
                self.accumulate(grads, *p, gp);
                self.accumulate(grads, *q, gq);
            }
            Op::StraightThrough(x) => {
                self.accumulate(grads, *x, g.clone());
            }
            Op::Custom(inputs, op) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = op.backward(&vals, out, g);
                for (v, gi) in inputs.iter().zip(gs) {
                    self.accumulate(grads, *v, gi);
                }
            }
        }
    }
}
