use std::cell::{Ref, RefCell};
use std::sync::Arc;

use super::kernels::{matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{elu_scalar, Grads, ParamId, ParamStore, Tensor, TensorError};

/// Records tensor operations for one forward pass.
///
/// Node ids grow monotonically, so id order is a topological order and the
/// backward sweep simply walks ids in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, f64),
    Elu(usize),
    Tanh(usize),
    Exp(usize),
    Gather(usize, Arc<[usize]>),
    ScatterAdd(usize, Arc<[usize]>),
    HeadSum(usize, usize),
    HeadScale(usize, usize),
    SegSoftmax(usize, Arc<[usize]>, usize),
    SegLogSoftmax(usize, Arc<[usize]>, usize),
    RowSoftmax(usize),
    RowLogSoftmax(usize),
    Sum(usize),
    MulConst(usize, Arc<Tensor>),
    Pick(usize, Arc<[usize]>),
    Clamp(usize, f64, f64),
    Minimum(usize, usize),
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn segment_count(seg: &[usize]) -> usize {
    seg.iter().max().map_or(0, |m| m + 1)
}

fn seg_softmax_forward(x: &Tensor, seg: &[usize], n_seg: usize, log: bool) -> Tensor {
    let (rows, cols) = (x.rows(), x.cols());
    let xd = x.data();
    let mut max = vec![f64::NEG_INFINITY; n_seg * cols];
    for r in 0..rows {
        for c in 0..cols {
            let m = &mut max[seg[r] * cols + c];
            *m = m.max(xd[r * cols + c]);
        }
    }
    let mut total = vec![0.0; n_seg * cols];
    for r in 0..rows {
        for c in 0..cols {
            total[seg[r] * cols + c] += (xd[r * cols + c] - max[seg[r] * cols + c]).exp();
        }
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let s = seg[r] * cols + c;
            let shifted = xd[r * cols + c] - max[s];
            out[r * cols + c] = if log {
                shifted - total[s].ln()
            } else {
                shifted.exp() / total[s]
            };
        }
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match op {
            Op::Param(_) => true,
            Op::Constant => false,
            _ => parents.iter().any(|&p| nodes[p].requires_grad),
        };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, &[])
    }

    /// Leaf that routes its gradient to `store`'s parameter `id`.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push(store.get(id).clone(), Op::Param(id), &[])
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse sweep from a scalar `loss`. Parameter gradients are added to
    /// `grads`; repeated calls accumulate.
    pub fn backward(&self, loss: Var<'_>, grads: &mut Grads) -> Result<(), TensorError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut g: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        g[loss.id] = Some(vec![1.0]);

        fn buf<'a>(g: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut Vec<f64>> {
            if !nodes[id].requires_grad {
                return None;
            }
            let n = nodes[id].value.numel();
            Some(g[id].get_or_insert_with(|| vec![0.0; n]))
        }

        for id in (0..=loss.id).rev() {
            let Some(gout) = g[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let y = node.value.data();
            match &node.op {
                Op::Constant => {}
                Op::Param(pid) => {
                    let dst = grads.get_mut(*pid).data_mut();
                    for (d, v) in dst.iter_mut().zip(&gout) {
                        *d += v;
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    if let Some(da) = buf(&mut g, &nodes, *a) {
                        matmul_bt_acc(&gout, tb.data(), da, m, k, n);
                    }
                    if let Some(db) = buf(&mut g, &nodes, *b) {
                        matmul_at_acc(ta.data(), &gout, db, m, k, n);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if let Some(da) = buf(&mut g, &nodes, *a) {
                        da.iter_mut().zip(&gout).for_each(|(d, v)| *d += v);
                    }
                    if let Some(db) = buf(&mut g, &nodes, *b) {
                        db.iter_mut().zip(&gout).for_each(|(d, v)| *d += sign * v);
                    }
                }
                Op::AddRow(a, b) => {
                    let cols = node.value.cols();
                    if let Some(da) = buf(&mut g, &nodes, *a) {
                        da.iter_mut().zip(&gout).for_each(|(d, v)| *d += v);
                    }
                    if let Some(db) = buf(&mut g, &nodes, *b) {
                        for row in gout.chunks(cols) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                    }
                }
                Op::MulRow(a, r) => {
                    let cols = node.value.cols();
                    let (ta, tr) = (&nodes[*a].value, &nodes[*r].value);
                    if let Some(da) = buf(&mut g, &nodes, *a) {
                        for (drow, grow) in da.chunks_mut(cols).zip(gout.chunks(cols)) {
                            for c in 0..cols {
                                drow[c] += grow[c] * tr.data()[c];
                            }
                        }
                    }
                    if let Some(dr) = buf(&mut g, &nodes, *r) {
                        for (arow, grow) in ta.data().chunks(cols).zip(gout.chunks(cols)) {
                            for c in 0..cols {
                                dr[c] += grow[c] * arow[c];
                            }
                        }
                    }
                }
                Op::Hadamard(a, b) => {
                    let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                    if let Some(da) = buf(&mut g, &nodes, *a) {
                        for ((d, v), w) in da.iter_mut().zip(&gout).zip(tb.data()) {
                            *d += v * w;
                        }
                    }
                    if let Some(db) = buf(&mut g, &nodes, *b) {
                        for ((d, v), w) in db.iter_mut().zip(&gout).zip(ta.data()) {
                            *d += v * w;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if let Some(da) = buf(&mut g, &nodes, *a) {
                        da.iter_mut().zip(&gout).for_each(|(d, v)| *d += c * v);
                    }
                }
                Op::Elu(a) => {
                    let x = nodes[*a].value.data();
                    if let Some(da) = buf(&mut g, &nodes, *a) {
                        for ((d, v), &xi) in da.iter_mut().zip(&gout).zip(x) {
                            *d += v * if xi > 0.0 { 1.0 } else { xi.exp() };
                        }
                    }
                }
                Op::Tanh(a) => {
                    if let Some(da) = buf(&mut g, &nodes, *a) {
                        for ((d, v), yi) in da.iter_mut().zip(&gout).zip(y) {
                            *d += v * (1.0 - yi * yi);
                        }
                    }
                }
                Op::Exp(a) => {
                    if let Some(da) = buf(&mut g, &nodes, *a) {
                        for ((d, v), yi) in da.iter_mut().zip(&gout).zip(y) {
                            *d += v * yi;
                        }
                    }
                }
                Op::Gather(a, idx) => {
                    let cols = node.value.cols();
                    if let Some(da) = buf(&mut g, &nodes, *a) {
                        for (r, &src) in idx.iter().enumerate() {
                            let grow = &gout[r * cols..(r + 1) * cols];
                            let drow = &mut da[src * cols..(src + 1) * cols];
                            drow.iter_mut().zip(grow).for_each(|(d, v)| *d += v);
                        }
                    }
                }
                Op::ScatterAdd(a, idx) => {
                    let cols = node.value.cols();
                    if let Some(da) = buf(&mut g, &nodes, *a) {
                        for (r, &dst) in idx.iter().enumerate() {
                            let grow = &gout[dst * cols..(dst + 1) * cols];
                            let drow = &mut da[r * cols..(r + 1) * cols];
                            drow.iter_mut().zip(grow).for_each(|(d, v)| *d += v);
                        }
                    }
                }
                Op::HeadSum(a, heads) => {
                    let cols = nodes[*a].value.cols();
                    let width = cols / heads;
                    if let Some(da) = buf(&mut g, &nodes, *a) {
                        for (r, drow) in da.chunks_mut(cols).enumerate() {
                            for (c, d) in drow.iter_mut().enumerate() {
                                *d += gout[r * heads + c / width];
                            }
                        }
                    }
                }
                Op::HeadScale(alpha, v) => {
                    let (ta, tv) = (&nodes[*alpha].value, &nodes[*v].value);
                    let (heads, cols) = (ta.cols(), tv.cols());
                    let width = cols / heads;
                    if let Some(dalpha) = buf(&mut g, &nodes, *alpha) {
                        for r in 0..tv.rows() {
                            for c in 0..cols {
                                dalpha[r * heads + c / width] +=
                                    gout[r * cols + c] * tv.data()[r * cols + c];
                            }
                        }
                    }
                    if let Some(dv) = buf(&mut g, &nodes, *v) {
                        for r in 0..tv.rows() {
                            for c in 0..cols {
                                dv[r * cols + c] += gout[r * cols + c] * ta.data()[r * heads + c / width];
                            }
                        }
                    }
                }
                Op::SegSoftmax(a, seg, n_seg) | Op::SegLogSoftmax(a, seg, n_seg) => {
                    let log = matches!(node.op, Op::SegLogSoftmax(..));
                    let cols = node.value.cols();
                    let rows = node.value.rows();
                    let mut inner = vec![0.0; n_seg * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let i = r * cols + c;
                            inner[seg[r] * cols + c] += if log { gout[i] } else { gout[i] * y[i] };
                        }
                    }
                    if let Some(da) = buf(&mut g, &nodes, *a) {
                        for r in 0..rows {
                            for c in 0..cols {
                                let i = r * cols + c;
                                let s = inner[seg[r] * cols + c];
                                da[i] += if log {
                                    gout[i] - y[i].exp() * s
                                } else {
                                    y[i] * (gout[i] - s)
                                };
                            }
                        }
                    }
                }
                Op::RowSoftmax(a) | Op::RowLogSoftmax(a) => {
                    let log = matches!(node.op, Op::RowLogSoftmax(_));
                    let cols = node.value.cols();
                    if let Some(da) = buf(&mut g, &nodes, *a) {
                        for ((drow, grow), yrow) in
                            da.chunks_mut(cols).zip(gout.chunks(cols)).zip(y.chunks(cols))
                        {
                            if log {
                                let s: f64 = grow.iter().sum();
                                for c in 0..cols {
                                    drow[c] += grow[c] - yrow[c].exp() * s;
                                }
                            } else {
                                let s: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                                for c in 0..cols {
                                    drow[c] += yrow[c] * (grow[c] - s);
                                }
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    if let Some(da) = buf(&mut g, &nodes, *a) {
                        da.iter_mut().for_each(|d| *d += gout[0]);
                    }
                }
                Op::MulConst(a, c) => {
                    if let Some(da) = buf(&mut g, &nodes, *a) {
                        for ((d, v), w) in da.iter_mut().zip(&gout).zip(c.data()) {
                            *d += v * w;
                        }
                    }
                }
                Op::Pick(a, idx) => {
                    if let Some(da) = buf(&mut g, &nodes, *a) {
                        for (k, &i) in idx.iter().enumerate() {
                            da[i] += gout[k];
                        }
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let x = nodes[*a].value.data();
                    if let Some(da) = buf(&mut g, &nodes, *a) {
                        for ((d, v), &xi) in da.iter_mut().zip(&gout).zip(x) {
                            if xi >= *lo && xi <= *hi {
                                *d += v;
                            }
                        }
                    }
                }
                Op::Minimum(a, b) => {
                    let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                    let pick_a: Vec<bool> =
                        ta.data().iter().zip(tb.data()).map(|(x, y)| x <= y).collect();
                    if let Some(da) = buf(&mut g, &nodes, *a) {
                        for ((d, v), &p) in da.iter_mut().zip(&gout).zip(&pick_a) {
                            if p {
                                *d += v;
                            }
                        }
                    }
                    if let Some(db) = buf(&mut g, &nodes, *b) {
                        for ((d, v), &p) in db.iter_mut().zip(&gout).zip(&pick_a) {
                            if !p {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Copy of the value with no gradient path.
    pub fn detach(&self) -> Var<'t> {
        let v = self.value().clone();
        self.tape.constant(v)
    }

    fn unary(&self, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var<'t> {
        let out = f(&self.value());
        self.tape.push(out, op, &[self.id])
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        let out = {
            let (a, b) = (self.value(), other.value());
            if a.cols() != b.rows() {
                return Err(mismatch("matmul", &a, &b));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut out = vec![0.0; m * n];
            matmul_acc(a.data(), b.data(), &mut out, m, k, n);
            Tensor::matrix(m, n, out)?
        };
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    fn zip_same(
        &self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>, TensorError> {
        let out = {
            let (a, b) = (self.value(), other.value());
            if !a.same_shape(&b) {
                return Err(mismatch(name, &a, &b));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape(), data)?
        };
        Ok(self.tape.push(out, op, &[self.id, other.id]))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.zip_same(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.zip_same(other, "sub", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn hadamard(&self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.zip_same(other, "hadamard", Op::Hadamard(self.id, other.id), |x, y| x * y)
    }

    pub fn minimum(&self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.zip_same(other, "minimum", Op::Minimum(self.id, other.id), f64::min)
    }

    fn row_broadcast(
        &self,
        row: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>, TensorError> {
        let out = {
            let (a, r) = (self.value(), row.value());
            if r.rows() != 1 || r.cols() != a.cols() {
                return Err(mismatch(name, &a, &r));
            }
            let cols = a.cols();
            let data = a
                .data()
                .chunks(cols)
                .flat_map(|chunk| chunk.iter().zip(r.data()).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>())
                .collect();
            Tensor::new(a.shape(), data)?
        };
        Ok(self.tape.push(out, op, &[self.id, row.id]))
    }

    /// `self[m×n] + row[1×n]`, broadcast over rows.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.row_broadcast(row, "add_row", Op::AddRow(self.id, row.id), |x, y| x + y)
    }

    /// `self[m×n] ⊙ row[1×n]`, broadcast over rows.
    pub fn mul_row(&self, row: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.row_broadcast(row, "mul_row", Op::MulRow(self.id, row.id), |x, y| x * y)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |t| t.map(|v| c * v))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn elu(&self) -> Var<'t> {
        self.unary(Op::Elu(self.id), |t| t.map(elu_scalar))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), |t| t.map(f64::tanh))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |t| t.map(f64::exp))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp(self.id, lo, hi), |t| t.map(|v| v.clamp(lo, hi)))
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |t| Tensor::scalar(t.data().iter().sum()))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&self, c: Tensor) -> Result<Var<'t>, TensorError> {
        let out = {
            let a = self.value();
            if !a.same_shape(&c) {
                return Err(mismatch("mul_const", &a, &c));
            }
            let data = a.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
            Tensor::new(a.shape(), data)?
        };
        Ok(self.tape.push(out, Op::MulConst(self.id, Arc::new(c)), &[self.id]))
    }

    /// Flat-index selection into a column vector.
    pub fn pick(&self, flat: &[usize]) -> Result<Var<'t>, TensorError> {
        let out = {
            let a = self.value();
            if let Some(&bad) = flat.iter().find(|&&i| i >= a.numel()) {
                return Err(TensorError::Invalid {
                    op: "pick",
                    message: format!("index {bad} out of {} elements", a.numel()),
                });
            }
            Tensor::column(flat.iter().map(|&i| a.data()[i]).collect())
        };
        Ok(self.tape.push(out, Op::Pick(self.id, flat.into()), &[self.id]))
    }

    /// Rows `idx[r]` of `self`, stacked.
    pub fn gather_rows(&self, idx: &Arc<[usize]>) -> Result<Var<'t>, TensorError> {
        let out = {
            let a = self.value();
            let cols = a.cols();
            let mut data = Vec::with_capacity(idx.len() * cols);
            for &r in idx.iter() {
                if r >= a.rows() {
                    return Err(TensorError::Invalid {
                        op: "gather_rows",
                        message: format!("row {r} out of {}", a.rows()),
                    });
                }
                data.extend_from_slice(a.row_slice(r));
            }
            Tensor::matrix(idx.len(), cols, data)?
        };
        Ok(self.tape.push(out, Op::Gather(self.id, idx.clone()), &[self.id]))
    }

    /// Sums row `r` of `self` into output row `idx[r]`.
    pub fn scatter_add_rows(&self, idx: &Arc<[usize]>, out_rows: usize) -> Result<Var<'t>, TensorError> {
        let out = {
            let a = self.value();
            if idx.len() != a.rows() {
                return Err(TensorError::Invalid {
                    op: "scatter_add_rows",
                    message: format!("{} indices for {} rows", idx.len(), a.rows()),
                });
            }
            let cols = a.cols();
            let mut data = vec![0.0; out_rows * cols];
            for (r, &dst) in idx.iter().enumerate() {
                if dst >= out_rows {
                    return Err(TensorError::Invalid {
                        op: "scatter_add_rows",
                        message: format!("target row {dst} out of {out_rows}"),
                    });
                }
                let row = a.row_slice(r);
                data[dst * cols..(dst + 1) * cols]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(d, v)| *d += v);
            }
            Tensor::matrix(out_rows, cols, data)?
        };
        Ok(self.tape.push(out, Op::ScatterAdd(self.id, idx.clone()), &[self.id]))
    }

    /// Sums each of `heads` equal column blocks: `[r×n] -> [r×heads]`.
    pub fn head_sum(&self, heads: usize) -> Result<Var<'t>, TensorError> {
        let out = {
            let a = self.value();
            if heads == 0 || !a.cols().is_multiple_of(heads) {
                return Err(TensorError::Invalid {
                    op: "head_sum",
                    message: format!("{} columns not divisible into {heads} heads", a.cols()),
                });
            }
            let width = a.cols() / heads;
            let data = a
                .data()
                .chunks(width)
                .map(|block| block.iter().sum())
                .collect();
            Tensor::matrix(a.rows(), heads, data)?
        };
        Ok(self.tape.push(out, Op::HeadSum(self.id, heads), &[self.id]))
    }

    /// Scales column block `h` of `values[r×n]` by `self[r, h]`.
    pub fn head_scale(&self, values: Var<'t>) -> Result<Var<'t>, TensorError> {
        let out = {
            let (alpha, v) = (self.value(), values.value());
            let heads = alpha.cols();
            if alpha.rows() != v.rows() || heads == 0 || v.cols() % heads != 0 {
                return Err(mismatch("head_scale", &alpha, &v));
            }
            let (cols, width) = (v.cols(), v.cols() / heads);
            let mut data = v.data().to_vec();
            for (r, row) in data.chunks_mut(cols).enumerate() {
                for (c, x) in row.iter_mut().enumerate() {
                    *x *= alpha.data()[r * heads + c / width];
                }
            }
            Tensor::new(v.shape(), data)?
        };
        Ok(self
            .tape
            .push(out, Op::HeadScale(self.id, values.id), &[self.id, values.id]))
    }

    fn check_segments(&self, seg: &[usize], op: &'static str) -> Result<(), TensorError> {
        let rows = self.value().rows();
        if seg.len() != rows {
            return Err(TensorError::Invalid {
                op,
                message: format!("{} segment ids for {rows} rows", seg.len()),
            });
        }
        Ok(())
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    pub fn segment_softmax(&self, seg: &Arc<[usize]>) -> Result<Var<'t>, TensorError> {
        self.check_segments(seg, "segment_softmax")?;
        let n_seg = segment_count(seg);
        let out = seg_softmax_forward(&self.value(), seg, n_seg, false);
        Ok(self
            .tape
            .push(out, Op::SegSoftmax(self.id, seg.clone(), n_seg), &[self.id]))
    }

    pub fn segment_log_softmax(&self, seg: &Arc<[usize]>) -> Result<Var<'t>, TensorError> {
        self.check_segments(seg, "segment_log_softmax")?;
        let n_seg = segment_count(seg);
        let out = seg_softmax_forward(&self.value(), seg, n_seg, true);
        Ok(self
            .tape
            .push(out, Op::SegLogSoftmax(self.id, seg.clone(), n_seg), &[self.id]))
    }

    /// Softmax along `axis` (0: down each column, 1: across each row).
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>, TensorError> {
        self.softmax_impl(axis, false)
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t>, TensorError> {
        self.softmax_impl(axis, true)
    }

    fn softmax_impl(&self, axis: usize, log: bool) -> Result<Var<'t>, TensorError> {
        match axis {
            0 => {
                let seg: Arc<[usize]> = vec![0; self.value().rows()].into();
                if log {
                    self.segment_log_softmax(&seg)
                } else {
                    self.segment_softmax(&seg)
                }
            }
            1 => {
                let out = {
                    let a = self.value();
                    let cols = a.cols();
                    let mut data = Vec::with_capacity(a.numel());
                    for row in a.data().chunks(cols) {
                        let p = super::softmax_slice(row);
                        if log {
                            data.extend(p.iter().map(|v| v.ln()));
                        } else {
                            data.extend(p);
                        }
                    }
                    if log {
                        // Recompute in log space to avoid ln(0) for tiny probabilities.
                        data.clear();
                        for row in a.data().chunks(cols) {
                            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                            let lse = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
                            data.extend(row.iter().map(|z| z - lse));
                        }
                    }
                    Tensor::new(a.shape(), data)?
                };
                let op = if log {
                    Op::RowLogSoftmax(self.id)
                } else {
                    Op::RowSoftmax(self.id)
                };
                Ok(self.tape.push(out, op, &[self.id]))
            }
            _ => Err(TensorError::Invalid {
                op: "softmax",
                message: format!("axis {axis} on a 2-d tensor"),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads_of(store: &ParamStore, f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>) -> Grads {
        let tape = Tape::new();
        let vars: Vec<Var> = store.ids().map(|id| tape.param(store, id)).collect();
        let loss = f(&tape, &vars);
        let mut grads = Grads::zeros_like(store);
        tape.backward(loss, &mut grads).unwrap();
        grads
    }

    #[test]
    fn sum_of_product_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let x = Tensor::column(vec![5.0, 7.0]);
        let grads = grads_of(&store, |tape, v| v[0].matmul(tape.constant(x.clone())).unwrap().sum());
        // d/dW sum(W x) = 1 xᵀ
        assert_eq!(grads.get(w).data(), &[5.0, 7.0, 5.0, 7.0]);
    }

    #[test]
    fn detached_branch_has_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row(vec![2.0, -1.0]));
        let grads = grads_of(&store, |_, v| v[0].detach().hadamard(v[0]).unwrap().sum());
        // Only the live factor contributes: d/dw (c ⊙ w) = c.
        assert_eq!(grads.get(w).data(), &[2.0, -1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let v = tape.constant(Tensor::row(vec![1.0, 2.0]));
        let mut grads = Grads::zeros_like(&ParamStore::new());
        assert!(matches!(tape.backward(v, &mut grads), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn backward_accumulates() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(3.0));
        let tape = Tape::new();
        let v = tape.param(&store, w);
        let loss = v.hadamard(v).unwrap().sum();
        let mut grads = Grads::zeros_like(&store);
        tape.backward(loss, &mut grads).unwrap();
        tape.backward(loss, &mut grads).unwrap();
        assert_eq!(grads.get(w).item(), 12.0);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(a.add(c).is_err());
        assert!(a.hadamard(c).is_err());
    }

    #[test]
    fn hadamard_values() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::row(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::row(vec![3.0, 4.0]));
        assert_eq!(a.hadamard(b).unwrap().value().data(), &[3.0, 8.0]);
    }

    #[test]
    fn softmax_axes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 3.0]]).unwrap());
        let rows = a.softmax(1).unwrap();
        for r in 0..2 {
            let s: f64 = rows.value().row_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!((rows.value().get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
        let cols = a.softmax(0).unwrap();
        for c in 0..3 {
            let s = cols.value().get(0, c) + cols.value().get(1, c);
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(a.softmax(2).is_err());
    }

    /// Central differences for every op with a custom backward rule.
    #[test]
    fn op_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let a = store.add(
            "a",
            Tensor::from_rows(&[vec![0.3, -0.7, 1.1, 0.2], vec![-0.4, 0.9, -1.3, 0.5], vec![0.8, 0.1, -0.2, -0.6]])
                .unwrap(),
        );
        let b = store.add(
            "b",
            Tensor::from_rows(&[vec![0.5, -0.2, 0.4, 0.9], vec![-0.8, 0.6, 0.3, -0.1], vec![0.2, 0.7, -0.5, 0.35]])
                .unwrap(),
        );
        let r = store.add("r", Tensor::row(vec![0.9, -1.2, 0.4, 0.7]));
        let m = store.add(
            "m",
            Tensor::from_rows(&[vec![0.1, 0.2], vec![-0.3, 0.4], vec![0.5, -0.6], vec![0.7, 0.8]]).unwrap(),
        );
        let seg: Arc<[usize]> = vec![0, 1, 0].into();
        let idx: Arc<[usize]> = vec![2, 0, 2, 1].into();
        let weights = Tensor::matrix(3, 2, vec![0.3, -1.0, 2.0, 0.5, -0.7, 1.4]).unwrap();

        let eval = |store: &ParamStore, grads: Option<&mut Grads>| -> f64 {
            let tape = Tape::new();
            let (va, vb, vr, vm) = (
                tape.param(store, a),
                tape.param(store, b),
                tape.param(store, r),
                tape.param(store, m),
            );
            let x = va.add(vb).unwrap().elu().mul_row(vr).unwrap();
            let y = va.sub(vb).unwrap().tanh().add_row(vr).unwrap();
            let z = x.hadamard(y).unwrap();
            let heads = z.head_sum(2).unwrap();
            let alpha = heads.segment_softmax(&seg).unwrap();
            let scaled = alpha.head_scale(y).unwrap();
            let gathered = scaled.gather_rows(&idx).unwrap();
            let scattered = gathered.scatter_add_rows(&idx, 3).unwrap();
            let proj = scattered.matmul(vm).unwrap();
            let lsm = proj.segment_log_softmax(&seg).unwrap();
            let rsm = proj.log_softmax(1).unwrap().exp();
            let mixed = lsm.add(rsm).unwrap().mul_const(weights.clone()).unwrap();
            let clipped = proj.clamp(-0.5, 0.5).minimum(proj.softmax(1).unwrap()).unwrap();
            let picked = mixed.pick(&[0, 3, 5]).unwrap().sum();
            let loss = picked.add(clipped.sum()).unwrap().add(mixed.exp().mean()).unwrap();
            if let Some(g) = grads {
                tape.backward(loss, g).unwrap();
            }
            loss.item()
        };

        let mut grads = Grads::zeros_like(&store);
        eval(&store, Some(&mut grads));

        let eps = 1e-6;
        for id in store.ids() {
            for i in 0..store.get(id).numel() {
                let mut plus = store.clone();
                plus.get_mut(id).data_mut()[i] += eps;
                let mut minus = store.clone();
                minus.get_mut(id).data_mut()[i] -= eps;
                let fd = (eval(&plus, None) - eval(&minus, None)) / (2.0 * eps);
                let an = grads.get(id).data()[i];
                assert!(
                    (fd - an).abs() < 1e-6 * (1.0 + fd.abs()),
                    "{} [{i}]: analytic {an} vs numeric {fd}",
                    store.name(id)
                );
            }
        }
    }
}
