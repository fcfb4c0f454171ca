//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] is an append-only tape. Every operation appends a node whose
//! value is fixed at creation; parents always precede their children, so the
//! tape order is a topological order and the graph is acyclic by
//! construction. Gradients are the only mutable state: [`Graph::backward`]
//! adds `dLoss/dNode` into every reachable node, so calling it twice without
//! [`Graph::zero_grad`] doubles every gradient.

use super::matrix::{gemm, gemm_slice, Matrix};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow {
        a: Var,
        row: Var,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        a: Var,
        start: usize,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    SelectRows {
        mask: Vec<bool>,
        on: Var,
        off: Var,
    },
    Sum(Var),
    RowSums(Var),
    RowNorms(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<Option<usize>>,
        probs: Matrix,
    },
    LstmCell {
        preact: Var,
        c_prev: Var,
        // Row-wise [i | f | g | o | tanh(c)].
        acts: Matrix,
    },
    LstmSequence {
        inputs: Var,
        recurrent: Var,
        lengths: Vec<usize>,
        reverse: bool,
        acts: Matrix,
        cells: Matrix,
    },
}

struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf node (parameter or input).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of `v`; zeros if backward never reached it.
    pub fn grad(&self, v: Var) -> Matrix {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()))
    }

    pub fn take_grad(&mut self, v: Var) -> Matrix {
        let node = &mut self.nodes[v.0];
        node.grad
            .take()
            .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, false)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, true)
    }

    fn matmul_ex(&mut self, a: Var, trans_a: bool, b: Var, trans_b: bool) -> Result<Var> {
        let (ma, mb) = (self.value(a), self.value(b));
        let (m, k) = if trans_a {
            (ma.cols(), ma.rows())
        } else {
            ma.shape()
        };
        let (kb, n) = if trans_b {
            (mb.cols(), mb.rows())
        } else {
            mb.shape()
        };
        if k != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: ma.shape(),
                right: mb.shape(),
            });
        }
        let mut out = Matrix::zeros(m, n);
        gemm(1.0, ma, trans_a, mb, trans_b, 0.0, &mut out);
        Ok(self.push(
            out,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
        ))
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let f: fn(f64, f64) -> f64 = match op {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Matrix::from_vec(va.rows(), va.cols(), data)?;
        Ok(self.push(out, Op::Binary(op, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn unary(&mut self, op: Unary, a: Var) -> Result<Var> {
        let va = self.value(a);
        let out = match op {
            Unary::Sigmoid => va.map(sigmoid),
            Unary::Tanh => va.map(f64::tanh),
            Unary::Exp => va.map(f64::exp),
            Unary::Log => {
                if let Some(bad) = va.data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive argument {bad}"),
                    });
                }
                va.map(f64::ln)
            }
            Unary::Sqrt => {
                if let Some(bad) = va.data().iter().find(|&&x| x < 0.0 || x.is_nan()) {
                    return Err(Error::Domain {
                        op: "sqrt",
                        detail: format!("negative argument {bad}"),
                    });
                }
                va.map(f64::sqrt)
            }
            Unary::Relu => va.map(|x| x.max(0.0)),
        };
        Ok(self.push(out, Op::Unary(op, a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        let out = self.value(a).map(|x| alpha * x);
        self.push(out, Op::Scale(a, alpha))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a))
    }

    /// Adds a `1 x C` row to every row of an `N x C` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: va.shape(),
                right: vr.shape(),
            });
        }
        let mut out = va.clone();
        let r = vr.row(0);
        for i in 0..out.rows() {
            for (x, b) in out.row_mut(i).iter_mut().zip(r) {
                *x += b;
            }
        }
        Ok(self.push(out, Op::AddRow { a, row }))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let cols = self.shape(first).1;
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.1 != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(first),
                    right: s,
                });
            }
            rows += s.0;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(first),
                    right: s,
                });
            }
            cols += s.1;
        }
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let va = self.value(a);
        if start + count > va.rows() {
            return Err(Error::invalid(format!(
                "slice_rows {start}..{} out of {} rows",
                start + count,
                va.rows()
            )));
        }
        let c = va.cols();
        let out = Matrix::from_vec(count, c, va.data()[start * c..(start + count) * c].to_vec())?;
        Ok(self.push(out, Op::SliceRows { a, start }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let va = self.value(a);
        if start + count > va.cols() {
            return Err(Error::invalid(format!(
                "slice_cols {start}..{} out of {} cols",
                start + count,
                va.cols()
            )));
        }
        let mut out = Matrix::zeros(va.rows(), count);
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..start + count]);
        }
        Ok(self.push(out, Op::SliceCols { a, start }))
    }

    /// Row `r` of the result comes from `on` where `mask[r]`, else from `off`.
    pub fn select_rows(&mut self, mask: &[bool], on: Var, off: Var) -> Result<Var> {
        self.same_shape("select_rows", on, off)?;
        let (von, voff) = (self.value(on), self.value(off));
        if mask.len() != von.rows() {
            return Err(Error::invalid(format!(
                "select_rows mask has {} entries for {} rows",
                mask.len(),
                von.rows()
            )));
        }
        let mut out = voff.clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(r).copy_from_slice(von.row(r));
            }
        }
        Ok(self.push(
            out,
            Op::SelectRows {
                mask: mask.to_vec(),
                on,
                off,
            },
        ))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// `N x C -> N x 1` row sums.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = (0..va.rows()).map(|r| va.row(r).iter().sum()).collect();
        let out = Matrix::from_vec(va.rows(), 1, data).expect("row count");
        self.push(out, Op::RowSums(a))
    }

    /// `N x C -> N x 1` Euclidean row norms. The gradient of a zero row is
    /// taken as zero.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = (0..va.rows())
            .map(|r| va.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let out = Matrix::from_vec(va.rows(), 1, data).expect("row count");
        self.push(out, Op::RowNorms(a))
    }

    /// Summed negative log-softmax likelihood of the labelled rows, as 1x1.
    ///
    /// Rows labelled `None` are padding and contribute neither value nor
    /// gradient. Uses the max-subtracted log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
        let vl = self.value(logits);
        let (n, c) = vl.shape();
        if labels.len() != n {
            return Err(Error::invalid(format!(
                "cross entropy has {} labels for {n} rows",
                labels.len()
            )));
        }
        let mut probs = Matrix::zeros(n, c);
        let mut total = 0.0;
        for (r, label) in labels.iter().enumerate() {
            let Some(y) = *label else { continue };
            if y >= c {
                return Err(Error::invalid(format!(
                    "label {y} out of range for {c} classes (row {r})"
                )));
            }
            let row = vl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = probs.row_mut(r);
            let mut z = 0.0;
            for (pi, &x) in p.iter_mut().zip(row) {
                *pi = (x - max).exp();
                z += *pi;
            }
            p.iter_mut().for_each(|pi| *pi /= z);
            total += max + z.ln() - row[y];
        }
        Ok(self.push(
            Matrix::filled(1, 1, total),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Fused LSTM cell.
    ///
    /// `preact` is `N x 4H` with gate blocks ordered input, forget, candidate,
    /// output; `c_prev` is `N x H`. The result is `N x 2H` holding `[h | c]`.
    pub fn lstm_cell(&mut self, preact: Var, c_prev: Var) -> Result<Var> {
        let (vz, vc) = (self.value(preact), self.value(c_prev));
        let (n, h4) = vz.shape();
        let h = vc.cols();
        if h4 != 4 * h || vc.rows() != n {
            return Err(Error::ShapeMismatch {
                op: "lstm_cell",
                left: vz.shape(),
                right: vc.shape(),
            });
        }
        let mut acts = Matrix::zeros(n, 5 * h);
        let mut out = Matrix::zeros(n, 2 * h);
        for r in 0..n {
            let z = vz.row(r);
            let cp = vc.row(r);
            let a = acts.row_mut(r);
            for j in 0..h {
                let i = sigmoid(z[j]);
                let f = sigmoid(z[h + j]);
                let g = z[2 * h + j].tanh();
                let o = sigmoid(z[3 * h + j]);
                let c = f * cp[j] + i * g;
                let tc = c.tanh();
                a[j] = i;
                a[h + j] = f;
                a[2 * h + j] = g;
                a[3 * h + j] = o;
                a[4 * h + j] = tc;
                let orow = &mut out.data_mut()[r * 2 * h..(r + 1) * 2 * h];
                orow[j] = o * tc;
                orow[h + j] = c;
            }
        }
        Ok(self.push(
            out,
            Op::LstmCell {
                preact,
                c_prev,
                acts,
            },
        ))
    }

    /// A whole LSTM direction over a padded, time-major batch.
    ///
    /// `inputs` is `(T * N) x 4H` holding the input projection plus bias for
    /// row `t * N + seq`; `recurrent` is `4H x H`. Steps run from `t = 0`
    /// upward, or downward when `reverse`. A sequence whose `t` lies past its
    /// length keeps its previous state, so forward padding repeats the last
    /// real state and backward padding stays at the zero initial state.
    /// Returns the `(T * N) x H` hidden states.
    pub fn lstm_sequence(&mut self, inputs: Var, recurrent: Var, lengths: &[usize], reverse: bool) -> Result<Var> {
        let (vx, vw) = (self.value(inputs), self.value(recurrent));
        let n = lengths.len();
        let h = vw.cols();
        if vw.rows() != 4 * h || vx.cols() != 4 * h || n == 0 || vx.rows() % n != 0 {
            return Err(Error::ShapeMismatch {
                op: "lstm_sequence",
                left: vx.shape(),
                right: vw.shape(),
            });
        }
        let t_max = vx.rows() / n;
        let mut acts = Matrix::zeros(t_max * n, 5 * h);
        let mut cells = Matrix::zeros(t_max * n, h);
        let mut out = Matrix::zeros(t_max * n, h);
        let mut z = vec![0.0; n * 4 * h];
        let (mut cp, mut c_new, mut h_new) = (vec![0.0; h], vec![0.0; h], vec![0.0; h]);
        let mut prev: Option<usize> = None;
        for step in 0..t_max {
            let t = if reverse { t_max - 1 - step } else { step };
            let block = t * n..(t + 1) * n;
            z.copy_from_slice(&vx.data()[block.start * 4 * h..block.end * 4 * h]);
            if let Some(p) = prev {
                let hp = &out.data()[p * n * h..(p + 1) * n * h];
                gemm_slice(1.0, hp, n, vw, true, 1.0, &mut z);
            }
            for (s, &len) in lengths.iter().enumerate() {
                let r = t * n + s;
                match prev {
                    Some(p) => cp.copy_from_slice(cells.row(p * n + s)),
                    None => cp.iter_mut().for_each(|x| *x = 0.0),
                }
                if t >= len {
                    if let Some(p) = prev {
                        let src = p * n + s;
                        out.data_mut().copy_within(src * h..(src + 1) * h, r * h);
                    }
                    cells.row_mut(r).copy_from_slice(&cp);
                    continue;
                }
                let zr = &z[s * 4 * h..(s + 1) * 4 * h];
                let a = acts.row_mut(r);
                for j in 0..h {
                    let i = sigmoid(zr[j]);
                    let f = sigmoid(zr[h + j]);
                    let g = zr[2 * h + j].tanh();
                    let o = sigmoid(zr[3 * h + j]);
                    let c = f * cp[j] + i * g;
                    let tc = c.tanh();
                    a[j] = i;
                    a[h + j] = f;
                    a[2 * h + j] = g;
                    a[3 * h + j] = o;
                    a[4 * h + j] = tc;
                    c_new[j] = c;
                    h_new[j] = o * tc;
                }
                cells.row_mut(r).copy_from_slice(&c_new);
                out.row_mut(r).copy_from_slice(&h_new);
            }
            prev = Some(t);
        }
        Ok(self.push(
            out,
            Op::LstmSequence {
                inputs,
                recurrent,
                lengths: lengths.to_vec(),
                reverse,
                acts,
                cells,
            },
        ))
    }

    /// Accumulates `dLoss/dNode` into every node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        let mut adj: Vec<Option<Matrix>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            match &mut self.nodes[i].grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (va, vb) = (val(a), val(b));
                {
                    let da = slot(adj, a, va.shape());
                    if trans_a {
                        gemm(1.0, vb, trans_b, g, true, 1.0, da);
                    } else {
                        gemm(1.0, g, false, vb, !trans_b, 1.0, da);
                    }
                }
                let db = slot(adj, b, vb.shape());
                if trans_b {
                    gemm(1.0, g, true, va, trans_a, 1.0, db);
                } else {
                    gemm(1.0, va, !trans_a, g, false, 1.0, db);
                }
            }
            &Op::Binary(op, a, b) => {
                let (va, vb) = (val(a), val(b));
                match op {
                    Binary::Add => {
                        slot(adj, a, va.shape()).add_assign(g);
                        slot(adj, b, vb.shape()).add_assign(g);
                    }
                    Binary::Sub => {
                        slot(adj, a, va.shape()).add_assign(g);
                        slot(adj, b, vb.shape()).add_scaled(-1.0, g);
                    }
                    Binary::Mul => {
                        zip_acc(slot(adj, a, va.shape()), g, vb, |g, y| g * y);
                        zip_acc(slot(adj, b, vb.shape()), g, va, |g, x| g * x);
                    }
                    Binary::Div => {
                        zip_acc(slot(adj, a, va.shape()), g, vb, |g, y| g / y);
                        let out = &node.value;
                        let db = slot(adj, b, vb.shape());
                        for ((d, &gi), (&o, &y)) in db
                            .data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .zip(out.data().iter().zip(vb.data()))
                        {
                            *d -= gi * o / y;
                        }
                    }
                }
            }
            &Op::Unary(op, a) => {
                let out = &node.value;
                let va = val(a);
                let da = slot(adj, a, va.shape());
                match op {
                    Unary::Sigmoid => zip_acc(da, g, out, |g, s| g * s * (1.0 - s)),
                    Unary::Tanh => zip_acc(da, g, out, |g, t| g * (1.0 - t * t)),
                    Unary::Exp => zip_acc(da, g, out, |g, e| g * e),
                    Unary::Log => zip_acc(da, g, va, |g, x| g / x),
                    Unary::Sqrt => zip_acc(da, g, out, |g, s| g * 0.5 / s),
                    Unary::Relu => zip_acc(da, g, va, |g, x| if x > 0.0 { g } else { 0.0 }),
                }
            }
            &Op::Scale(a, alpha) => {
                slot(adj, a, val(a).shape()).add_scaled(alpha, g);
            }
            &Op::AddScalar(a) => {
                slot(adj, a, val(a).shape()).add_assign(g);
            }
            &Op::AddRow { a, row } => {
                slot(adj, a, val(a).shape()).add_assign(g);
                let dr = slot(adj, row, val(row).shape());
                for r in 0..g.rows() {
                    for (d, x) in dr.data_mut().iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = val(p).shape();
                    let n = shape.0 * shape.1;
                    let dp = slot(adj, p, shape);
                    for (d, x) in dp.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                        *d += x;
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let shape = val(p).shape();
                    let dp = slot(adj, p, shape);
                    for r in 0..shape.0 {
                        let src = &g.row(r)[off..off + shape.1];
                        for (d, x) in dp.row_mut(r).iter_mut().zip(src) {
                            *d += x;
                        }
                    }
                    off += shape.1;
                }
            }
            &Op::SliceRows { a, start } => {
                let shape = val(a).shape();
                let c = shape.1;
                let da = slot(adj, a, shape);
                let dst = &mut da.data_mut()[start * c..start * c + g.len()];
                for (d, x) in dst.iter_mut().zip(g.data()) {
                    *d += x;
                }
            }
            &Op::SliceCols { a, start } => {
                let shape = val(a).shape();
                let da = slot(adj, a, shape);
                for r in 0..g.rows() {
                    let dst = &mut da.row_mut(r)[start..start + g.cols()];
                    for (d, x) in dst.iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
            }
            Op::SelectRows { mask, on, off } => {
                let shape = val(*on).shape();
                {
                    let don = slot(adj, *on, shape);
                    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        for (d, x) in don.row_mut(r).iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                }
                let doff = slot(adj, *off, shape);
                for (r, _) in mask.iter().enumerate().filter(|(_, &m)| !m) {
                    for (d, x) in doff.row_mut(r).iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
            }
            &Op::Sum(a) => {
                let s = g.scalar();
                slot(adj, a, val(a).shape())
                    .data_mut()
                    .iter_mut()
                    .for_each(|d| *d += s);
            }
            &Op::RowSums(a) => {
                let da = slot(adj, a, val(a).shape());
                for r in 0..da.rows() {
                    let gr = g.get(r, 0);
                    da.row_mut(r).iter_mut().for_each(|d| *d += gr);
                }
            }
            &Op::RowNorms(a) => {
                let va = val(a);
                let norms = &node.value;
                let da = slot(adj, a, va.shape());
                for r in 0..va.rows() {
                    let n = norms.get(r, 0);
                    if n == 0.0 {
                        continue;
                    }
                    let k = g.get(r, 0) / n;
                    for (d, x) in da.row_mut(r).iter_mut().zip(va.row(r)) {
                        *d += k * x;
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let s = g.scalar();
                let dl = slot(adj, *logits, probs.shape());
                for (r, label) in labels.iter().enumerate() {
                    let Some(y) = *label else { continue };
                    let d = dl.row_mut(r);
                    for (dj, p) in d.iter_mut().zip(probs.row(r)) {
                        *dj += s * p;
                    }
                    d[y] -= s;
                }
            }
            Op::LstmCell {
                preact,
                c_prev,
                acts,
            } => {
                let vc = val(*c_prev);
                let h = vc.cols();
                let n = vc.rows();
                let mut dc_prev = Matrix::zeros(n, h);
                {
                    let dz = slot(adj, *preact, (n, 4 * h));
                    for r in 0..n {
                        let a = acts.row(r);
                        let gr = g.row(r);
                        let cp = vc.row(r);
                        let dzr = dz.row_mut(r);
                        let dcp = dc_prev.row_mut(r);
                        for j in 0..h {
                            let (i, f, gg, o, tc) =
                                (a[j], a[h + j], a[2 * h + j], a[3 * h + j], a[4 * h + j]);
                            let dh = gr[j];
                            let dc = gr[h + j] + dh * o * (1.0 - tc * tc);
                            let d_o = dh * tc;
                            dzr[j] += dc * gg * i * (1.0 - i);
                            dzr[h + j] += dc * cp[j] * f * (1.0 - f);
                            dzr[2 * h + j] += dc * i * (1.0 - gg * gg);
                            dzr[3 * h + j] += d_o * o * (1.0 - o);
                            dcp[j] = dc * f;
                        }
                    }
                }
                slot(adj, *c_prev, (n, h)).add_assign(&dc_prev);
            }
            Op::LstmSequence {
                inputs,
                recurrent,
                lengths,
                reverse,
                acts,
                cells,
            } => {
                let out = &node.value;
                let vw = val(*recurrent);
                let h = vw.cols();
                let n = lengths.len();
                let t_max = out.rows() / n;
                let order: Vec<usize> = if *reverse {
                    (0..t_max).rev().collect()
                } else {
                    (0..t_max).collect()
                };
                let mut dz = Matrix::zeros(t_max * n, 4 * h);
                // Hidden state entering each step, aligned with `dz` rows.
                let mut h_in = Matrix::zeros(t_max * n, h);
                let mut dh = vec![0.0; n * h];
                let mut dc = vec![0.0; n * h];
                for k in (0..t_max).rev() {
                    let t = order[k];
                    let prev = (k > 0).then(|| order[k - 1]);
                    for s in 0..n {
                        let r = t * n + s;
                        let dhs = &mut dh[s * h..(s + 1) * h];
                        for (d, x) in dhs.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                        if t >= lengths[s] {
                            // Held state: gradients pass straight through.
                            continue;
                        }
                        if let Some(p) = prev {
                            h_in.row_mut(r).copy_from_slice(out.row(p * n + s));
                        }
                        let a = acts.row(r);
                        let dcs = &mut dc[s * h..(s + 1) * h];
                        let dzr = dz.row_mut(r);
                        for j in 0..h {
                            let (i, f, gg, o, tc) = (a[j], a[h + j], a[2 * h + j], a[3 * h + j], a[4 * h + j]);
                            let cp = prev.map_or(0.0, |p| cells.get(p * n + s, j));
                            let dct = dcs[j] + dhs[j] * o * (1.0 - tc * tc);
                            dzr[j] = dct * gg * i * (1.0 - i);
                            dzr[h + j] = dct * cp * f * (1.0 - f);
                            dzr[2 * h + j] = dct * i * (1.0 - gg * gg);
                            dzr[3 * h + j] = dhs[j] * tc * o * (1.0 - o);
                            dcs[j] = dct * f;
                        }
                        dhs.iter_mut().for_each(|d| *d = 0.0);
                    }
                    if prev.is_some() {
                        let block = &dz.data()[t * n * 4 * h..(t + 1) * n * 4 * h];
                        gemm_slice(1.0, block, n, vw, false, 1.0, &mut dh);
                    }
                }
                slot(adj, *inputs, dz.shape()).add_assign(&dz);
                let dw = slot(adj, *recurrent, vw.shape());
                gemm(1.0, &dz, true, &h_in, false, 1.0, dw);
            }
        }
    }
}

fn slot(adj: &mut [Option<Matrix>], v: Var, shape: (usize, usize)) -> &mut Matrix {
    adj[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

fn zip_acc(dst: &mut Matrix, g: &Matrix, other: &Matrix, f: impl Fn(f64, f64) -> f64) {
    for ((d, &gi), &x) in dst.data_mut().iter_mut().zip(g.data()).zip(other.data()) {
        *d += f(gi, x);
    }
}
