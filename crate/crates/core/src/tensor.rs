//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! Every value is a 2-D matrix; vectors are `1 × n` rows and scalars are `1 × 1`.
//! A [`Graph`] is built fresh for each forward pass. Leaves created with
//! `trainable = false` are treated as constants: no gradient is ever computed
//! for them, and the backward pass skips every branch that cannot reach a
//! trainable leaf.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

/// Scalar element type of every tensor (`f32` for training, `f64` for gradient checks).
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
}

impl Float for f32 {}
impl Float for f64 {}

#[inline]
pub fn cst<F: Float>(x: f64) -> F {
    F::from_f64(x).expect("representable constant")
}

pub type Mat<F> = Array2<F>;

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row-sparse matrix used for normalized graph adjacency.
#[derive(Clone, Debug)]
pub struct SparseRows<F> {
    pub n_cols: usize,
    pub rows: Vec<Vec<(usize, F)>>,
}

impl<F: Float> SparseRows<F> {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn matmul(&self, x: ArrayView2<F>) -> Mat<F> {
        let mut out = Mat::zeros((self.rows.len(), x.ncols()));
        for (i, row) in self.rows.iter().enumerate() {
            let mut o = out.row_mut(i);
            for &(j, w) in row {
                o.scaled_add(w, &x.row(j));
            }
        }
        out
    }

    /// `selfᵀ · g`
    pub fn matmul_transposed(&self, g: ArrayView2<F>) -> Mat<F> {
        let mut out = Mat::zeros((self.n_cols, g.ncols()));
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                out.row_mut(j).scaled_add(w, &g.row(i));
            }
        }
        out
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// Broadcast a `1 × n` row over every row of the left operand.
    AddRow(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat<F>,
        rstd: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Mat<F>>,
    },
    Rows(Var, usize),
    Concat(Vec<Var>),
    Gather(Var, Vec<usize>),
    SpMM(Arc<SparseRows<F>>, Var),
    MeanRows(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Mat<F>,
    },
    Bce {
        probs: Var,
        labels: Mat<F>,
        eps: F,
    },
    Sum(Var),
}

struct Node<F> {
    value: Arc<Mat<F>>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Graph<F: Float> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<F>, op: Op<F>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Arc<Mat<F>>, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat<F>) -> Var {
        self.leaf(Arc::new(value), false)
    }

    pub fn value(&self, v: Var) -> &Mat<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(F::zero()));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (out, xhat, rstd) = layer_norm(self.value(x), self.value(gamma), self.value(beta));
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Multi-head scaled dot-product attention. `causal` masks keys after the query position.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let offset = if causal { Some(0) } else { None };
        let (out, probs) = attention(
            self.value(q).view(),
            self.value(k).view(),
            self.value(v).view(),
            heads,
            offset,
        );
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    pub fn rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(out, Op::Rows(a, start), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat: column mismatch");
        self.push(out, Op::Concat(parts.to_vec()), parts)
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let out = self.value(table).select(Axis(0), ids);
        self.push(out, Op::Gather(table, ids.to_vec()), &[table])
    }

    pub fn spmm(&mut self, adj: Arc<SparseRows<F>>, x: Var) -> Var {
        let out = adj.matmul(self.value(x).view());
        self.push(out, Op::SpMM(adj, x), &[x])
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean of empty matrix")
            .insert_axis(Axis(0));
        self.push(out, Op::MeanRows(a), &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Mean over `targets` of `-log softmax(logits[row])[class]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Var {
        assert!(!targets.is_empty(), "cross_entropy without targets");
        let probs = softmax_rows(self.value(logits));
        let lsm = log_softmax_rows(self.value(logits));
        let n = cst::<F>(targets.len() as f64);
        let total = targets
            .iter()
            .fold(F::zero(), |acc, &(r, c)| acc - lsm[[r, c]]);
        let out = Mat::from_elem((1, 1), total / n);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Summed binary cross-entropy with probabilities clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, probs: Var, labels: Mat<F>, eps: F) -> Var {
        let p = self.value(probs);
        assert_eq!(p.dim(), labels.dim(), "bce: label shape");
        let one = F::one();
        let mut total = F::zero();
        Zip::from(p).and(&labels).for_each(|&p, &y| {
            let pc = p.max(eps).min(one - eps);
            total -= y * pc.ln() + (one - y) * (one - pc).ln();
        });
        let out = Mat::from_elem((1, 1), total);
        self.push(out, Op::Bce { probs, labels, eps }, &[probs])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    /// Back-propagates from a `1 × 1` root. Only nodes that require grad receive one.
    pub fn backward(&self, root: Var) -> Grads<F> {
        assert_eq!(self.value(root).dim(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Mat<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Grads { grads };
        }
        grads[root.0] = Some(Mat::from_elem((1, 1), F::one()));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<F>, g: &Mat<F>, grads: &mut [Option<Mat<F>>]) {
        let acc = |grads: &mut [Option<Mat<F>>], v: Var, d: Mat<F>| match &mut grads[v.0] {
            Some(existing) => *existing += &d,
            slot => *slot = Some(d),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.wants(*b) {
                    acc(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.dot(self.value(*b)));
                }
                if self.wants(*b) {
                    acc(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    acc(grads, *a, g.t().to_owned());
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*row) {
                    acc(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    acc(grads, *a, g * *c);
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let mut d = g.clone();
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| {
                            if x <= F::zero() {
                                *d = F::zero()
                            }
                        });
                    acc(grads, *a, d);
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let mut d = g.clone();
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= gelu_grad(x));
                    acc(grads, *a, d);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                if self.wants(*gamma) {
                    acc(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.wants(*beta) {
                    acc(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma);
                    let n = cst::<F>(xhat.ncols() as f64);
                    let mut dx = Mat::zeros(xhat.raw_dim());
                    for r in 0..xhat.nrows() {
                        let dxhat = &g.row(r) * &gam.row(0);
                        let xh = xhat.row(r);
                        let mean_d = dxhat.sum() / n;
                        let mean_dx = (&dxhat * &xh).sum() / n;
                        let mut out = dx.row_mut(r);
                        for c in 0..xh.len() {
                            out[c] = rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let dh = qv.ncols() / heads;
                let scale = cst::<F>(1.0 / (dh as f64).sqrt());
                let mut dq = Mat::zeros(qv.raw_dim());
                let mut dk = Mat::zeros(kv.raw_dim());
                let mut dv = Mat::zeros(vv.raw_dim());
                for (h, p) in probs.iter().enumerate() {
                    let cols = s![.., h * dh..(h + 1) * dh];
                    let go = g.slice(cols);
                    if self.wants(*v) {
                        dv.slice_mut(cols).assign(&p.t().dot(&go));
                    }
                    if self.wants(*q) || self.wants(*k) {
                        let dp = go.dot(&vv.slice(cols).t());
                        let mut ds = p * &dp;
                        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let dot = row.sum();
                            row.zip_mut_with(&prow, |d, &pp| *d -= pp * dot);
                        }
                        ds *= scale;
                        if self.wants(*q) {
                            dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                        }
                        if self.wants(*k) {
                            dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                        }
                    }
                }
                if self.wants(*q) {
                    acc(grads, *q, dq);
                }
                if self.wants(*k) {
                    acc(grads, *k, dk);
                }
                if self.wants(*v) {
                    acc(grads, *v, dv);
                }
            }
            Op::Rows(a, start) => {
                if self.wants(*a) {
                    let mut d = Mat::zeros(self.value(*a).raw_dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                    acc(grads, *a, d);
                }
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.value(*p).nrows();
                    if self.wants(*p) {
                        acc(grads, *p, g.slice(s![start..start + n, ..]).to_owned());
                    }
                    start += n;
                }
            }
            Op::Gather(table, ids) => {
                if self.wants(*table) {
                    let mut d = Mat::zeros(self.value(*table).raw_dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = d.row_mut(id);
                        row += &g.row(r);
                    }
                    acc(grads, *table, d);
                }
            }
            Op::SpMM(adj, x) => {
                if self.wants(*x) {
                    acc(grads, *x, adj.matmul_transposed(g.view()));
                }
            }
            Op::MeanRows(a) => {
                if self.wants(*a) {
                    let n = self.value(*a).nrows();
                    let row = g.row(0).mapv(|x| x / cst::<F>(n as f64));
                    let d = Mat::from_shape_fn((n, row.len()), |(_, c)| row[c]);
                    acc(grads, *a, d);
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let p = &node.value;
                    let mut d = g * &**p;
                    for (mut row, prow) in d.rows_mut().into_iter().zip(p.rows()) {
                        let dot = row.sum();
                        row.zip_mut_with(&prow, |d, &pp| *d -= pp * dot);
                    }
                    acc(grads, *a, d);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.wants(*logits) {
                    let scale = g[[0, 0]] / cst::<F>(targets.len() as f64);
                    let mut d = Mat::zeros(probs.raw_dim());
                    let mut row_uses = vec![0usize; probs.nrows()];
                    for &(r, c) in targets {
                        row_uses[r] += 1;
                        d[[r, c]] -= scale;
                    }
                    for (r, &uses) in row_uses.iter().enumerate() {
                        if uses > 0 {
                            let w = scale * cst::<F>(uses as f64);
                            d.row_mut(r).scaled_add(w, &probs.row(r));
                        }
                    }
                    acc(grads, *logits, d);
                }
            }
            Op::Bce { probs, labels, eps } => {
                if self.wants(*probs) {
                    let one = F::one();
                    let gs = g[[0, 0]];
                    let mut d = Mat::zeros(labels.raw_dim());
                    Zip::from(&mut d)
                        .and(self.value(*probs))
                        .and(labels)
                        .for_each(|d, &p, &y| {
                            if p > *eps && p < one - *eps {
                                *d = gs * (-(y / p) + (one - y) / (one - p));
                            }
                        });
                    acc(grads, *probs, d);
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let shape = self.value(*a).raw_dim();
                    acc(grads, *a, Mat::from_elem(shape, g[[0, 0]]));
                }
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<F> {
    grads: Vec<Option<Mat<F>>>,
}

impl<F: Float> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Mat<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

// ---------------------------------------------------------------------------
// Kernels shared by the graph ops and the graph-free inference paths.
// ---------------------------------------------------------------------------

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const LN_EPS: f64 = 1e-5;

#[inline]
pub fn gelu<F: Float>(x: F) -> F {
    let half = cst::<F>(0.5);
    let inner = cst::<F>(GELU_C) * (x + cst::<F>(0.044715) * x * x * x);
    half * x * (F::one() + inner.tanh())
}

#[inline]
fn gelu_grad<F: Float>(x: F) -> F {
    let half = cst::<F>(0.5);
    let c = cst::<F>(GELU_C);
    let a = cst::<F>(0.044715);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (F::one() + cst::<F>(3.0) * a * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * dinner
}

/// Row-wise layer normalization. Returns `(output, normalized input, 1/std per row)`.
pub fn layer_norm<F: Float>(x: &Mat<F>, gamma: &Mat<F>, beta: &Mat<F>) -> (Mat<F>, Mat<F>, Vec<F>) {
    let n = cst::<F>(x.ncols() as f64);
    let mut xhat = x.clone();
    let mut rstd = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / n;
        let var = row.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / n;
        let r = F::one() / (var + cst::<F>(LN_EPS)).sqrt();
        row.mapv_inplace(|v| (v - mean) * r);
        rstd.push(r);
    }
    let out = &(&xhat * &gamma.row(0)) + &beta.row(0);
    (out, xhat, rstd)
}

pub fn softmax_rows<F: Float>(x: &Mat<F>) -> Mat<F> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

pub fn log_softmax_rows<F: Float>(x: &Mat<F>) -> Mat<F> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(F::neg_infinity(), |a, &b| a.max(b));
        let lse = row.fold(F::zero(), |a, &v| a + (v - m).exp()).ln() + m;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Multi-head attention of `q` rows against `k`/`v` rows.
///
/// With `causal_offset = Some(o)`, query row `i` sits at absolute position `o + i`
/// and may only attend to key rows `0..=o + i` (key rows are absolute positions).
/// `None` means full bidirectional attention.
pub fn attention<F: Float>(
    q: ArrayView2<F>,
    k: ArrayView2<F>,
    v: ArrayView2<F>,
    heads: usize,
    causal_offset: Option<usize>,
) -> (Mat<F>, Vec<Mat<F>>) {
    let d = q.ncols();
    assert_eq!(d % heads, 0, "hidden size not divisible by heads");
    let dh = d / heads;
    let scale = cst::<F>(1.0 / (dh as f64).sqrt());
    let mut out = Mat::zeros((q.nrows(), d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores *= scale;
        if let Some(offset) = causal_offset {
            for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                let limit = offset + i + 1;
                if limit < row.len() {
                    row.slice_mut(s![limit..]).fill(F::neg_infinity());
                }
            }
        }
        let p = softmax_rows(&scores);
        out.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    (out, probs)
}
