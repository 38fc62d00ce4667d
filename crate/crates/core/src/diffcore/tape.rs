use std::cell::RefCell;
use std::ops;
use std::sync::Arc;

use super::array::{gemm, Array};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// `a · bᵀ`
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    Concat(Vec<usize>),
    SliceCols(usize, usize),
    Sum(usize),
    SumLast(usize),
    LogSumExpLast(usize),
    GatherRows(usize, Arc<Vec<usize>>),
    Pick(usize, Arc<Vec<usize>>),
}

struct Node {
    value: Arc<Array>,
    op: Op,
    needs_grad: bool,
}

/// Records array operations for reverse-mode differentiation.
///
/// A tape lives in a single thread; build one per forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a constant: no gradient flows into it.
    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push(Arc::new(value), Op::Leaf, false)
    }

    pub fn constant_shared(&self, value: Arc<Array>) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Records a differentiable leaf.
    pub fn param(&self, value: Array) -> Var<'_> {
        self.push(Arc::new(value), Op::Leaf, true)
    }

    pub fn param_shared(&self, value: Arc<Array>) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    fn push(&self, value: Arc<Array>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Arc<Array> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn record(&self, value: Array, op: Op, inputs: &[usize]) -> Var<'_> {
        let needs = inputs.iter().any(|&i| self.needs(i));
        self.push(Arc::new(value), op, needs)
    }

    /// Reverse sweep from a scalar root.
    ///
    /// Panics if `root` is not a single-element array.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(root.tape, self), "root belongs to another tape");
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.len(),
            1,
            "backward needs a scalar root, got shape {:?}",
            nodes[root.id].value.shape()
        );
        let mut grads: Vec<Option<Array>> = vec![None; nodes.len()];
        grads[root.id] = Some(Array::full(nodes[root.id].value.shape(), 1.0));

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let out = &node.value;
            let send = |target: usize, delta: Array, grads: &mut Vec<Option<Array>>| {
                if !nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                &Op::MatMul(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    if nodes[a].needs_grad {
                        let (d, m, n) = gemm(g.data(), dims2(&g), false, bv.data(), dims2(bv), true);
                        send(a, Array::matrix(m, n, d), &mut grads);
                    }
                    if nodes[b].needs_grad {
                        let (d, m, n) = gemm(av.data(), dims2(av), true, g.data(), dims2(&g), false);
                        send(b, Array::matrix(m, n, d), &mut grads);
                    }
                }
                &Op::MatMulT(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    if nodes[a].needs_grad {
                        let (d, m, n) = gemm(g.data(), dims2(&g), false, bv.data(), dims2(bv), false);
                        send(a, Array::matrix(m, n, d), &mut grads);
                    }
                    if nodes[b].needs_grad {
                        let (d, m, n) = gemm(g.data(), dims2(&g), true, av.data(), dims2(av), false);
                        send(b, Array::matrix(m, n, d), &mut grads);
                    }
                }
                &Op::Add(a, b) => {
                    send(a, g.clone(), &mut grads);
                    send(b, g, &mut grads);
                }
                &Op::Sub(a, b) => {
                    send(a, g.clone(), &mut grads);
                    send(b, g.map(|v| -v), &mut grads);
                }
                &Op::Mul(a, b) => {
                    if nodes[a].needs_grad {
                        send(a, g.zip_map(val(b), |g, y| g * y), &mut grads);
                    }
                    if nodes[b].needs_grad {
                        send(b, g.zip_map(val(a), |g, x| g * x), &mut grads);
                    }
                }
                &Op::AddRow(a, r) => {
                    if nodes[r].needs_grad {
                        let c = g.cols();
                        let mut acc = vec![0.0; c];
                        for row in g.data().chunks(c) {
                            for (s, v) in acc.iter_mut().zip(row) {
                                *s += v;
                            }
                        }
                        send(r, Array::new(val(r).shape().to_vec(), acc), &mut grads);
                    }
                    send(a, g, &mut grads);
                }
                &Op::Scale(a, s) => send(a, g.map(|v| v * s), &mut grads),
                &Op::Offset(a) => send(a, g, &mut grads),
                &Op::Exp(a) => send(a, g.zip_map(out, |g, y| g * y), &mut grads),
                &Op::Log(a) => send(a, g.zip_map(val(a), |g, x| g / x), &mut grads),
                &Op::Tanh(a) => send(a, g.zip_map(out, |g, y| g * (1.0 - y * y)), &mut grads),
                &Op::Sigmoid(a) => send(a, g.zip_map(out, |g, y| g * y * (1.0 - y)), &mut grads),
                &Op::Square(a) => send(a, g.zip_map(val(a), |g, x| 2.0 * g * x), &mut grads),
                &Op::Clamp(a, lo, hi) => {
                    send(a, g.zip_map(val(a), |g, x| if (lo..=hi).contains(&x) { g } else { 0.0 }), &mut grads)
                }
                Op::Concat(parts) => {
                    let c = g.cols();
                    let rows = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let pv = val(p);
                        let pc = pv.cols();
                        if nodes[p].needs_grad {
                            let mut d = Vec::with_capacity(rows * pc);
                            for r in 0..rows {
                                d.extend_from_slice(&g.data()[r * c + offset..r * c + offset + pc]);
                            }
                            send(p, Array::new(pv.shape().to_vec(), d), &mut grads);
                        }
                        offset += pc;
                    }
                }
                &Op::SliceCols(a, start) => {
                    let av = val(a);
                    let c = av.cols();
                    let gc = g.cols();
                    let mut d = vec![0.0; av.len()];
                    for r in 0..g.rows() {
                        d[r * c + start..r * c + start + gc].copy_from_slice(g.row(r));
                    }
                    send(a, Array::new(av.shape().to_vec(), d), &mut grads);
                }
                &Op::Sum(a) => {
                    let gv = g.item();
                    send(a, Array::full(val(a).shape(), gv), &mut grads);
                }
                &Op::SumLast(a) => {
                    let av = val(a);
                    let c = av.cols();
                    let mut d = Vec::with_capacity(av.len());
                    for &gv in g.data() {
                        d.extend(std::iter::repeat_n(gv, c));
                    }
                    send(a, Array::new(av.shape().to_vec(), d), &mut grads);
                }
                &Op::LogSumExpLast(a) => {
                    let av = val(a);
                    let c = av.cols();
                    let mut d = Vec::with_capacity(av.len());
                    for (r, (&gv, &lse)) in g.data().iter().zip(out.data()).enumerate() {
                        d.extend(av.row(r).iter().map(|&x| gv * (x - lse).exp()));
                    }
                    debug_assert_eq!(d.len(), av.rows() * c);
                    send(a, Array::new(av.shape().to_vec(), d), &mut grads);
                }
                Op::GatherRows(table, idx) => {
                    let tv = val(*table);
                    let c = tv.cols();
                    let mut d = vec![0.0; tv.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for (dst, src) in d[i * c..(i + 1) * c].iter_mut().zip(g.row(r)) {
                            *dst += src;
                        }
                    }
                    send(*table, Array::new(tv.shape().to_vec(), d), &mut grads);
                }
                Op::Pick(a, idx) => {
                    let av = val(*a);
                    let c = av.cols();
                    let mut d = vec![0.0; av.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        d[r * c + i] = g.data()[r];
                    }
                    send(*a, Array::new(av.shape().to_vec(), d), &mut grads);
                }
            }
        }
        Gradients { grads }
    }
}

fn dims2(a: &Array) -> (usize, usize) {
    assert_eq!(a.rank(), 2, "expected a matrix, got shape {:?}", a.shape());
    (a.shape()[0], a.shape()[1])
}

/// Result of [`Tape::backward`]: one gradient slot per recorded node.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros if `v` did not
    /// influence the root.
    pub fn get(&self, v: Var<'_>) -> Array {
        match self.grads.get(v.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Array::zeros(v.value().shape()),
        }
    }

    pub fn take(&mut self, v: Var<'_>) -> Array {
        match self.grads.get_mut(v.id).and_then(Option::take) {
            Some(g) => g,
            None => Array::zeros(v.value().shape()),
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Array> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn unary(self, op: Op, f: impl FnOnce(&Array) -> Array) -> Var<'t> {
        let v = f(&self.value());
        self.tape.record(v, op, &[self.id])
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let (d, m, n) = gemm(a.data(), dims2(&a), false, b.data(), dims2(&b), false);
        self.tape.record(Array::matrix(m, n, d), Op::MatMul(self.id, rhs.id), &[self.id, rhs.id])
    }

    /// `self · rhsᵀ`
    pub fn matmul_t(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let (d, m, n) = gemm(a.data(), dims2(&a), false, b.data(), dims2(&b), true);
        self.tape.record(Array::matrix(m, n, d), Op::MatMulT(self.id, rhs.id), &[self.id, rhs.id])
    }

    fn binary(self, rhs: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        self.same_tape(&rhs);
        let v = self.value().zip_map(&rhs.value(), f);
        self.tape.record(v, op, &[self.id, rhs.id])
    }

    /// Broadcasts a vector over the rows of `self`.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        self.same_tape(&row);
        let (a, r) = (self.value(), row.value());
        let c = a.cols();
        assert_eq!(r.len(), c, "add_row: row of {} vs {} columns", r.len(), c);
        let mut d = a.data().to_vec();
        for chunk in d.chunks_mut(c) {
            for (x, y) in chunk.iter_mut().zip(r.data()) {
                *x += y;
            }
        }
        self.tape.record(Array::new(a.shape().to_vec(), d), Op::AddRow(self.id, row.id), &[self.id, row.id])
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, s), |a| a.map(|v| v * s))
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        self.unary(Op::Offset(self.id), |a| a.map(|v| v + c))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |a| a.map(f64::exp))
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Log(self.id), |a| a.map(f64::ln))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), |a| a.map(f64::tanh))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |a| a.map(sigmoid))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |a| a.map(|v| v * v))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp(self.id, lo, hi), |a| a.map(|v| v.clamp(lo, hi)))
    }

    /// Concatenates along the last axis; all parts must share the leading extent.
    pub fn concat(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let values: Vec<Arc<Array>> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].rows();
        let lead = &values[0].shape()[..values[0].rank().saturating_sub(1)];
        let total: usize = values.iter().map(|v| v.cols()).sum();
        for v in &values {
            assert_eq!(v.rows(), rows, "concat row mismatch");
        }
        let mut d = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                d.extend_from_slice(v.row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.record(Array::new(shape, d), Op::Concat(ids.clone()), &ids)
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t> {
        self.unary(Op::SliceCols(self.id, start), |a| {
            let c = a.cols();
            assert!(start + len <= c, "slice {}..{} out of {} columns", start, start + len, c);
            let mut d = Vec::with_capacity(a.rows() * len);
            for r in 0..a.rows() {
                d.extend_from_slice(&a.row(r)[start..start + len]);
            }
            let mut shape = a.shape().to_vec();
            *shape.last_mut().expect("slice on scalar") = len;
            Array::new(shape, d)
        })
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |a| Array::scalar(a.sum()))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums out the last axis.
    pub fn sum_last(self) -> Var<'t> {
        self.unary(Op::SumLast(self.id), |a| {
            let c = a.cols();
            let d: Vec<f64> = a.data().chunks(c).map(|r| r.iter().sum()).collect();
            Array::new(a.shape()[..a.rank() - 1].to_vec(), d)
        })
    }

    /// Max-shifted log-sum-exp over the last axis.
    pub fn logsumexp_last(self) -> Var<'t> {
        self.unary(Op::LogSumExpLast(self.id), |a| {
            let c = a.cols();
            let d: Vec<f64> = a.data().chunks(c).map(logsumexp).collect();
            Array::new(a.shape()[..a.rank() - 1].to_vec(), d)
        })
    }

    /// Selects rows of a matrix by index.
    pub fn gather_rows(self, idx: Arc<Vec<usize>>) -> Var<'t> {
        let id = self.id;
        let ix = idx.clone();
        self.unary(Op::GatherRows(id, idx), move |t| {
            let c = t.cols();
            let mut d = Vec::with_capacity(ix.len() * c);
            for &i in ix.iter() {
                assert!(i < t.rows(), "gather index {} out of {} rows", i, t.rows());
                d.extend_from_slice(t.row(i));
            }
            Array::matrix(ix.len(), c, d)
        })
    }

    /// Per row `r`, the element at column `idx[r]`.
    pub fn pick(self, idx: Arc<Vec<usize>>) -> Var<'t> {
        let id = self.id;
        let ix = idx.clone();
        self.unary(Op::Pick(id, idx), move |a| {
            assert_eq!(a.rows(), ix.len(), "pick needs one index per row");
            let d = ix.iter().enumerate().map(|(r, &i)| a.at(r, i)).collect();
            Array::vector(d)
        })
    }
}

impl<'t> ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        let op = Op::Add(self.id, rhs.id);
        self.binary(rhs, op, |a, b| a + b)
    }
}

impl<'t> ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let op = Op::Sub(self.id, rhs.id);
        self.binary(rhs, op, |a, b| a - b)
    }
}

impl<'t> ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let op = Op::Mul(self.id, rhs.id);
        self.binary(rhs, op, |a, b| a * b)
    }
}

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-sum-exp with max shift; `-inf` for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
