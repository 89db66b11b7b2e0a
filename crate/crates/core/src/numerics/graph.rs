//! Define-by-run reverse-mode tape.
//!
//! Every operation appends a node holding its forward value; node indices
//! are a topological order, so the backward sweep walks them in reverse and
//! visits each node once.

use std::rc::Rc;

use super::{Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    LogSoftmax(Var),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    Pick(Var, Rc<[usize]>),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    BroadcastRows(Var),
    GroupedAttention {
        q: Var,
        k: Var,
        v: Var,
        groups: Rc<[(usize, usize)]>,
        scale: f64,
        probs: Vec<Matrix>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Softmax(_) => "softmax",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::Transpose(_) => "transpose",
            Op::Pick(..) => "pick",
            Op::Clamp(..) => "clamp",
            Op::Minimum(..) => "minimum",
            Op::Maximum(..) => "maximum",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::GroupedAttention { .. } => "grouped_attention",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

/// A recorded computation. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    first_non_finite: Option<usize>,
}

/// Per-node gradients from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn softmax_rows(m: &Matrix) -> Matrix {
    super::rowwise_softmax(m)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(self.nodes.len());
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.scalar_value()
    }

    /// Fails with the first node whose forward value is not finite.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some(node) => Err(Error::Numeric {
                node,
                op: self.nodes[node].op.name(),
                detail: " in forward pass".into(),
            }),
            None => Ok(()),
        }
    }

    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    /// `a + b` with the `1 x c` row `b` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(bm.rows(), 1, "add_row expects a row vector");
        assert_eq!(am.cols(), bm.cols(), "add_row column mismatch");
        let mut v = am.clone();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(bm.as_slice()) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Elementwise product with the `1 x c` row `b` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(bm.rows(), 1, "mul_row expects a row vector");
        assert_eq!(am.cols(), bm.cols(), "mul_row column mismatch");
        let mut v = am.clone();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(bm.as_slice()) {
                *x *= y;
            }
        }
        self.push(v, Op::MulRow(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = super::rowwise_log_softmax(self.value(a));
        self.push(v, Op::LogSoftmax(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Matrix::hcat(&mats);
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(m.rows(), len);
        for r in 0..m.rows() {
            out.row_mut(r).copy_from_slice(&m.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.rows(), "slice_rows out of range");
        let idx: Vec<usize> = (start..start + len).collect();
        let out = m.select_rows(&idx);
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Column `idx[r]` of each row `r`, as an `n x 1` column.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a);
        assert_eq!(m.rows(), idx.len(), "pick needs one index per row");
        let data = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < m.cols(), "pick index out of range");
                m.get(r, c)
            })
            .collect();
        let v = Matrix::from_vec(idx.len(), 1, data);
        self.push(v, Op::Pick(a, idx.into()))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), f64::min);
        self.push(v, Op::Minimum(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), f64::max);
        self.push(v, Op::Maximum(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Matrix::scalar(m.sum() / m.len().max(1) as f64);
        self.push(v, Op::Mean(a))
    }

    /// Sum of each row, as an `n x 1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let data = (0..m.rows()).map(|r| m.row(r).iter().sum()).collect();
        let v = Matrix::from_vec(m.rows(), 1, data);
        self.push(v, Op::RowSum(a))
    }

    /// Repeats a `1 x c` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let m = self.value(a);
        assert_eq!(m.rows(), 1, "broadcast_rows expects a row vector");
        let mut data = Vec::with_capacity(n * m.cols());
        for _ in 0..n {
            data.extend_from_slice(m.as_slice());
        }
        let v = Matrix::from_vec(n, m.cols(), data);
        self.push(v, Op::BroadcastRows(a))
    }

    /// Scaled dot-product self-attention applied independently to each
    /// contiguous row group `(start, len)`:
    /// `softmax(Q_g K_g^T * scale) V_g`.
    pub fn grouped_attention(&mut self, q: Var, k: Var, v: Var, groups: &[(usize, usize)], scale: f64) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qm.shape(), km.shape(), "query/key shape mismatch");
        assert_eq!(qm.rows(), vm.rows(), "value rows mismatch");
        let mut out = Matrix::zeros(qm.rows(), vm.cols());
        let mut probs = Vec::with_capacity(groups.len());
        for &(start, len) in groups {
            assert!(start + len <= qm.rows(), "attention group out of range");
            let idx: Vec<usize> = (start..start + len).collect();
            let (qg, kg, vg) = (qm.select_rows(&idx), km.select_rows(&idx), vm.select_rows(&idx));
            let mut scores = qg.matmul_nt(&kg);
            scores.scale_assign(scale);
            let p = softmax_rows(&scores);
            let o = p.matmul(&vg);
            for (i, r) in idx.iter().enumerate() {
                out.row_mut(*r).copy_from_slice(o.row(i));
            }
            probs.push(p);
        }
        self.push(
            out,
            Op::GroupedAttention {
                q,
                k,
                v,
                groups: groups.into(),
                scale,
                probs,
            },
        )
    }

    /// Backward sweep from a `1 x 1` loss; returns every node's gradient.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        self.check_finite()?;
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(Error::Numeric {
                    node: i,
                    op: self.nodes[i].op.name(),
                    detail: " in backward pass".into(),
                });
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates `d loss / d param` into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                store.accumulate(*id, g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                acc(grads, *a, g.matmul_nt(self.value(*b)));
                acc(grads, *b, self.value(*a).matmul_tn(g));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, column_sums(g));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::MulRow(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                let mut ga = g.clone();
                for r in 0..ga.rows() {
                    for (x, y) in ga.row_mut(r).iter_mut().zip(bm.as_slice()) {
                        *x *= y;
                    }
                }
                acc(grads, *a, ga);
                acc(grads, *b, column_sums(&g.zip_map(am, |x, y| x * y)));
            }
            Op::Scale(a, s) => acc(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::Tanh(a) => acc(grads, *a, g.zip_map(out, |x, y| x * (1.0 - y * y))),
            Op::Relu(a) => acc(
                grads,
                *a,
                g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
            ),
            Op::Sigmoid(a) => acc(grads, *a, g.zip_map(out, |x, y| x * y * (1.0 - y))),
            Op::Exp(a) => acc(grads, *a, g.zip_map(out, |x, y| x * y)),
            Op::Square(a) => acc(grads, *a, g.zip_map(self.value(*a), |x, y| 2.0 * x * y)),
            Op::LogSoftmax(a) => {
                let mut ga = g.clone();
                for r in 0..ga.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for (x, y) in ga.row_mut(r).iter_mut().zip(out.row(r)) {
                        *x -= y.exp() * total;
                    }
                }
                acc(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let mut ga = g.clone();
                for r in 0..ga.rows() {
                    let dot: f64 = g.row(r).iter().zip(out.row(r)).map(|(x, y)| x * y).sum();
                    for (x, y) in ga.row_mut(r).iter_mut().zip(out.row(r)) {
                        *x = y * (*x - dot);
                    }
                }
                acc(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    let mut gp = Matrix::zeros(g.rows(), cols);
                    for r in 0..g.rows() {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[start..start + cols]);
                    }
                    acc(grads, *p, gp);
                    start += cols;
                }
            }
            Op::SliceCols(a, start) => {
                let am = self.value(*a);
                let mut ga = Matrix::zeros(am.rows(), am.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(grads, *a, ga);
            }
            Op::SliceRows(a, start) => {
                let am = self.value(*a);
                let mut ga = Matrix::zeros(am.rows(), am.cols());
                for r in 0..g.rows() {
                    ga.row_mut(start + r).copy_from_slice(g.row(r));
                }
                acc(grads, *a, ga);
            }
            Op::Transpose(a) => acc(grads, *a, g.transpose()),
            Op::Pick(a, idx) => {
                let am = self.value(*a);
                let mut ga = Matrix::zeros(am.rows(), am.cols());
                for (r, &c) in idx.iter().enumerate() {
                    ga.set(r, c, g.get(r, 0));
                }
                acc(grads, *a, ga);
            }
            Op::Clamp(a, lo, hi) => acc(
                grads,
                *a,
                g.zip_map(self.value(*a), |x, y| if y >= *lo && y <= *hi { x } else { 0.0 }),
            ),
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let take_min = matches!(node.op, Op::Minimum(..));
                let (am, bm) = (self.value(*a), self.value(*b));
                // Ties route the gradient to `a`.
                let to_a = am.zip_map(bm, |x, y| {
                    let a_wins = if take_min { x <= y } else { x >= y };
                    if a_wins {
                        1.0
                    } else {
                        0.0
                    }
                });
                acc(grads, *a, g.zip_map(&to_a, |x, m| x * m));
                acc(grads, *b, g.zip_map(&to_a, |x, m| x * (1.0 - m)));
            }
            Op::Sum(a) => {
                let am = self.value(*a);
                acc(grads, *a, Matrix::filled(am.rows(), am.cols(), g.scalar_value()));
            }
            Op::Mean(a) => {
                let am = self.value(*a);
                let s = g.scalar_value() / am.len().max(1) as f64;
                acc(grads, *a, Matrix::filled(am.rows(), am.cols(), s));
            }
            Op::RowSum(a) => {
                let am = self.value(*a);
                let mut ga = Matrix::zeros(am.rows(), am.cols());
                for r in 0..am.rows() {
                    ga.row_mut(r).fill(g.get(r, 0));
                }
                acc(grads, *a, ga);
            }
            Op::BroadcastRows(a) => acc(grads, *a, column_sums(g)),
            Op::GroupedAttention {
                q,
                k,
                v,
                groups,
                scale,
                probs,
            } => {
                let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                let mut gq = Matrix::zeros(qm.rows(), qm.cols());
                let mut gk = Matrix::zeros(km.rows(), km.cols());
                let mut gv = Matrix::zeros(vm.rows(), vm.cols());
                for (&(start, len), p) in groups.iter().zip(probs) {
                    let idx: Vec<usize> = (start..start + len).collect();
                    let (qg, kg, vg) = (qm.select_rows(&idx), km.select_rows(&idx), vm.select_rows(&idx));
                    let go = g.select_rows(&idx);
                    let gvg = p.matmul_tn(&go);
                    let gp = go.matmul_nt(&vg);
                    let mut gs = gp.clone();
                    for r in 0..gs.rows() {
                        let dot: f64 = gp.row(r).iter().zip(p.row(r)).map(|(x, y)| x * y).sum();
                        for (x, y) in gs.row_mut(r).iter_mut().zip(p.row(r)) {
                            *x = y * (*x - dot) * scale;
                        }
                    }
                    let gqg = gs.matmul(&kg);
                    let gkg = gs.matmul_tn(&qg);
                    for (i, r) in idx.iter().enumerate() {
                        gq.row_mut(*r).copy_from_slice(gqg.row(i));
                        gk.row_mut(*r).copy_from_slice(gkg.row(i));
                        gv.row_mut(*r).copy_from_slice(gvg.row(i));
                    }
                }
                acc(grads, *q, gq);
                acc(grads, *k, gk);
                acc(grads, *v, gv);
            }
        }
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, x) in out.as_mut_slice().iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    out
}
