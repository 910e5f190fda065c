//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends one node to the tape and records its local
//! adjoint rule. Because nodes are only ever appended, tape order is a
//! topological order of the graph, and [`Var::backward`] walks it once in
//! reverse.

use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    DivScalar(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    /// Stores the per-row norms of the input.
    NormalizeRows(usize, Vec<f64>),
    Frobenius(usize),
    Sum(usize),
    RowSum(usize),
    WeightedRowSum(usize, Tensor),
    /// Column labels and the column each row leaves out.
    ClassSums(usize, Vec<usize>, Vec<Option<usize>>),
    MeanRows(usize, Vec<usize>),
    DotRows(usize, usize, usize, usize),
    LogSoftmaxRows(usize),
    StackRows(Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for later reverse replay.
///
/// A tape is single-threaded; independent tapes can be used on separate
/// threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to one node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}({r}x{c})", self.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an input tensor. Leaves receive gradients like any node.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Alias of [`Tape::leaf`] for inputs that are never queried for gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.push(Tensor::scalar(value), Op::Leaf)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_ref(self.id).clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.value_ref(self.id).shape()
    }

    /// Value of a 1×1 node.
    pub fn item(&self) -> f64 {
        let v = self.tape.value_ref(self.id);
        debug_assert_eq!(v.shape(), (1, 1));
        v.data()[0]
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables belong to different tapes"
        );
    }

    fn unary(&self, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var<'t> {
        let out = f(&self.tape.value_ref(self.id));
        self.tape.push(out, op)
    }

    fn binary_same_shape(
        &self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let out = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            if a.shape() != b.shape() {
                return Err(Error::shape(name, a.shape(), b.shape()));
            }
            a.zip_map(&b, f)
        };
        Ok(self.tape.push(out, op))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(other, "subtract", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(other, "multiply", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, s), |a| a.scale(s))
    }

    /// Adds a `1×m` row to every row of an `n×m` node.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&row);
        let out = {
            let a = self.tape.value_ref(self.id);
            let r = self.tape.value_ref(row.id);
            if r.rows() != 1 || r.cols() != a.cols() {
                return Err(Error::shape("add-row", a.shape(), r.shape()));
            }
            let mut out = a.clone();
            let m = a.cols();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += r.data()[i % m];
            }
            out
        };
        Ok(self.tape.push(out, Op::AddRow(self.id, row.id)))
    }

    /// Divides every entry by a 1×1 node.
    pub fn div_scalar(&self, s: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&s);
        let out = {
            let a = self.tape.value_ref(self.id);
            let d = self.tape.value_ref(s.id);
            if d.shape() != (1, 1) {
                return Err(Error::shape("divide-by-scalar", a.shape(), d.shape()));
            }
            let d = d.data()[0];
            if d == 0.0 {
                return Err(Error::domain("divide-by-scalar", "divisor is zero"));
            }
            a.map(|v| v / d)
        };
        Ok(self.tape.push(out, Op::DivScalar(self.id, s.id)))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let out = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            a.matmul(&b)?
        };
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Var<'t> {
        self.unary(Op::Transpose(self.id), Tensor::transpose)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |a| a.map(f64::exp))
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&self) -> Result<Var<'t>> {
        let out = {
            let a = self.tape.value_ref(self.id);
            if let Some(pos) = a.data().iter().position(|&v| v <= 0.0 || v.is_nan()) {
                let cols = a.cols().max(1);
                return Err(Error::domain(
                    "log",
                    format!(
                        "row {} column {} holds non-positive value {}",
                        pos / cols,
                        pos % cols,
                        a.data()[pos]
                    ),
                ));
            }
            a.map(f64::ln)
        };
        Ok(self.tape.push(out, Op::Log(self.id)))
    }

    /// Rectifier; the adjoint at exactly zero is zero.
    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |a| a.map(|v| v.max(0.0)))
    }

    /// Scales each row to unit ℓ2 norm; zero rows are a domain error and
    /// overflowed rows a non-finite error.
    pub fn normalize_rows(&self) -> Result<Var<'t>> {
        let (out, norms) = {
            let a = self.tape.value_ref(self.id);
            let (n, m) = a.shape();
            let mut out = a.clone();
            let mut norms = Vec::with_capacity(n);
            for r in 0..n {
                let norm = a.row(r).iter().fold(0.0, |acc, &v| acc + v * v).sqrt();
                if !norm.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "row-l2-normalize: row {r} has norm {norm}"
                    )));
                }
                if norm == 0.0 {
                    return Err(Error::domain(
                        "row-l2-normalize",
                        format!("row {r} has norm {norm}"),
                    ));
                }
                for v in &mut out.data_mut()[r * m..(r + 1) * m] {
                    *v /= norm;
                }
                norms.push(norm);
            }
            (out, norms)
        };
        Ok(self.tape.push(out, Op::NormalizeRows(self.id, norms)))
    }

    /// Normalizes columns to unit ℓ2 norm.
    pub fn normalize_cols(&self) -> Result<Var<'t>> {
        Ok(self.transpose().normalize_rows()?.transpose())
    }

    pub fn frobenius_norm(&self) -> Var<'t> {
        self.unary(Op::Frobenius(self.id), |a| {
            Tensor::scalar(a.frobenius_norm())
        })
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |a| Tensor::scalar(a.sum()))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = {
            let v = self.tape.value_ref(self.id);
            v.len().max(1)
        };
        self.sum().scale(1.0 / n as f64)
    }

    /// Sums each row, producing an `n×1` column.
    pub fn row_sum(&self) -> Var<'t> {
        self.unary(Op::RowSum(self.id), |a| {
            let m = a.cols();
            let data = (0..a.rows())
                .map(|r| a.data()[r * m..(r + 1) * m].iter().fold(0.0, |s, &v| s + v))
                .collect();
            Tensor::from_raw(a.rows(), 1, data)
        })
    }

    /// `Σ_k a[r,k]·w[r,k]` for each row `r` against constant weights,
    /// producing an `n×1` column.
    pub fn weighted_row_sum(&self, weights: Tensor) -> Result<Var<'t>> {
        let out = {
            let a = self.tape.value_ref(self.id);
            if a.shape() != weights.shape() {
                return Err(Error::shape("weighted-row-sum", a.shape(), weights.shape()));
            }
            let m = a.cols();
            let data = (0..a.rows())
                .map(|r| {
                    let span = r * m..(r + 1) * m;
                    a.data()[span.clone()]
                        .iter()
                        .zip(&weights.data()[span])
                        .fold(0.0, |s, (&x, &w)| s + x * w)
                })
                .collect();
            Tensor::from_raw(a.rows(), 1, data)
        };
        Ok(self.tape.push(out, Op::WeightedRowSum(self.id, weights)))
    }

    /// `out[r,c] = Σ a[r,k]` over columns `k` labelled `c`, leaving out
    /// column `skip[r]` when given. Produces `n×num_classes`.
    pub fn class_sums(
        &self,
        labels: &[usize],
        num_classes: usize,
        skip: Vec<Option<usize>>,
    ) -> Result<Var<'t>> {
        let out = {
            let a = self.tape.value_ref(self.id);
            let (n, m) = a.shape();
            if labels.len() != m || skip.len() != n {
                return Err(Error::shape(
                    "class-sums",
                    (n, m),
                    (skip.len(), labels.len()),
                ));
            }
            if labels.iter().any(|&y| y >= num_classes) {
                return Err(Error::Contract(format!(
                    "class-sums: label out of range for {num_classes} classes"
                )));
            }
            let mut out = Tensor::zeros(n, num_classes);
            for (r, &drop) in skip.iter().enumerate() {
                let dst = &mut out.data_mut()[r * num_classes..(r + 1) * num_classes];
                for (k, (&v, &y)) in a.row(r).iter().zip(labels).enumerate() {
                    if drop != Some(k) {
                        dst[y] += v;
                    }
                }
            }
            out
        };
        Ok(self
            .tape
            .push(out, Op::ClassSums(self.id, labels.to_vec(), skip)))
    }

    /// Mean of the listed rows, producing a `1×m` row.
    pub fn mean_rows(&self, indices: &[usize]) -> Result<Var<'t>> {
        let out = {
            let a = self.tape.value_ref(self.id);
            if indices.is_empty() {
                return Err(Error::Contract("mean over an empty index set".into()));
            }
            if let Some(&bad) = indices.iter().find(|&&i| i >= a.rows()) {
                return Err(Error::Contract(format!(
                    "row index {bad} out of range for {} rows",
                    a.rows()
                )));
            }
            let m = a.cols();
            let mut acc = vec![0.0; m];
            for &i in indices {
                for (s, &v) in acc.iter_mut().zip(a.row(i)) {
                    *s += v;
                }
            }
            let k = indices.len() as f64;
            Tensor::from_raw(1, m, acc.into_iter().map(|s| s / k).collect())
        };
        Ok(self.tape.push(out, Op::MeanRows(self.id, indices.to_vec())))
    }

    /// Dot product of row `i` of `self` with row `j` of `other`.
    pub fn dot_rows(&self, i: usize, other: Var<'t>, j: usize) -> Result<Var<'t>> {
        self.same_tape(&other);
        let out = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            if a.cols() != b.cols() || i >= a.rows() || j >= b.rows() {
                return Err(Error::shape("dot-row", a.shape(), b.shape()));
            }
            let d = a
                .row(i)
                .iter()
                .zip(b.row(j))
                .fold(0.0, |s, (&x, &y)| s + x * y);
            Tensor::scalar(d)
        };
        Ok(self.tape.push(out, Op::DotRows(self.id, i, other.id, j)))
    }

    /// Row-wise log-softmax, computed with the max-shift for stability.
    pub fn log_softmax_rows(&self) -> Var<'t> {
        self.unary(Op::LogSoftmaxRows(self.id), |a| {
            let m = a.cols();
            let mut out = a.clone();
            for r in 0..a.rows() {
                let row = &mut out.data_mut()[r * m..(r + 1) * m];
                let max = row.iter().fold(f64::NEG_INFINITY, |x, &v| x.max(v));
                let lse = max + row.iter().fold(0.0, |s, &v| s + (v - max).exp()).ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            out
        })
    }

    /// Concatenates `1×m` (or `k×m`) nodes vertically.
    pub fn stack_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("stack of zero rows".into()))?;
        let tape = first.tape;
        let out = {
            let mut data = Vec::new();
            let cols = first.shape().1;
            let mut rows = 0;
            for p in parts {
                first.same_tape(p);
                let v = tape.value_ref(p.id);
                if v.cols() != cols {
                    return Err(Error::shape("stack-rows", (rows, cols), v.shape()));
                }
                rows += v.rows();
                data.extend_from_slice(v.data());
            }
            Tensor::from_raw(rows, cols, data)
        };
        Ok(tape.push(out, Op::StackRows(parts.iter().map(|p| p.id).collect())))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self) -> Result<Gradients> {
        let nodes = self.tape.nodes.borrow();
        let root = &nodes[self.id];
        if root.value.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a 1x1 root, got {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.id + 1];
        grads[self.id] = Some(Tensor::scalar(1.0));

        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            propagate(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: usize| &nodes[id].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y));
            accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y));
        }
        Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
        Op::AddRow(a, r) => {
            accumulate(grads, *a, g.clone());
            let m = g.cols();
            let mut acc = vec![0.0; m];
            for row in 0..g.rows() {
                for (s, &v) in acc.iter_mut().zip(g.row(row)) {
                    *s += v;
                }
            }
            accumulate(grads, *r, Tensor::from_raw(1, m, acc));
        }
        Op::DivScalar(a, s) => {
            let d = val(*s).data()[0];
            accumulate(grads, *a, g.scale(1.0 / d));
            let ga = g
                .data()
                .iter()
                .zip(val(*a).data())
                .fold(0.0, |acc, (&x, &y)| acc + x * y);
            accumulate(grads, *s, Tensor::scalar(-ga / (d * d)));
        }
        Op::MatMul(a, b) => {
            // C = A·B: dA = G·Bᵀ, dB = Aᵀ·G
            let ga = g
                .matmul(&val(*b).transpose())
                .expect("matmul adjoint shape");
            let gb = val(*a).transpose().matmul(g).expect("matmul adjoint shape");
            accumulate(grads, *a, ga);
            accumulate(grads, *b, gb);
        }
        Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
        Op::Exp(a) => accumulate(grads, *a, g.zip_map(&node.value, |x, y| x * y)),
        Op::Log(a) => accumulate(grads, *a, g.zip_map(val(*a), |x, y| x / y)),
        Op::Relu(a) => accumulate(
            grads,
            *a,
            g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
        ),
        Op::NormalizeRows(a, norms) => {
            let y = &node.value;
            let m = y.cols();
            let mut out = Tensor::zeros(y.rows(), m);
            for (r, &norm) in norms.iter().enumerate() {
                let yr = y.row(r);
                let gr = g.row(r);
                let proj = yr.iter().zip(gr).fold(0.0, |s, (&a, &b)| s + a * b);
                for c in 0..m {
                    out.data_mut()[r * m + c] = (gr[c] - yr[c] * proj) / norm;
                }
            }
            accumulate(grads, *a, out);
        }
        Op::Frobenius(a) => {
            let n = node.value.data()[0];
            let s = g.data()[0];
            let ga = if n == 0.0 {
                Tensor::zeros(val(*a).rows(), val(*a).cols())
            } else {
                val(*a).scale(s / n)
            };
            accumulate(grads, *a, ga);
        }
        Op::Sum(a) => {
            let (r, c) = val(*a).shape();
            accumulate(grads, *a, Tensor::filled(r, c, g.data()[0]));
        }
        Op::RowSum(a) => {
            let (r, c) = val(*a).shape();
            let mut out = Tensor::zeros(r, c);
            for row in 0..r {
                let v = g.data()[row];
                out.data_mut()[row * c..(row + 1) * c].fill(v);
            }
            accumulate(grads, *a, out);
        }
        Op::WeightedRowSum(a, w) => {
            let c = w.cols();
            let mut out = w.clone();
            for (row, &v) in g.data().iter().enumerate() {
                out.data_mut()[row * c..(row + 1) * c]
                    .iter_mut()
                    .for_each(|x| *x *= v);
            }
            accumulate(grads, *a, out);
        }
        Op::ClassSums(a, labels, skip) => {
            let (n, m) = val(*a).shape();
            let c = g.cols();
            let mut out = Tensor::zeros(n, m);
            for (r, &drop) in skip.iter().enumerate() {
                let gr = &g.data()[r * c..(r + 1) * c];
                let dst = &mut out.data_mut()[r * m..(r + 1) * m];
                for (k, (d, &y)) in dst.iter_mut().zip(labels).enumerate() {
                    if drop != Some(k) {
                        *d = gr[y];
                    }
                }
            }
            accumulate(grads, *a, out);
        }
        Op::MeanRows(a, indices) => {
            let (r, c) = val(*a).shape();
            let mut out = Tensor::zeros(r, c);
            let k = indices.len() as f64;
            for &i in indices {
                for (o, &v) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(g.data()) {
                    *o += v / k;
                }
            }
            accumulate(grads, *a, out);
        }
        Op::DotRows(a, i, b, j) => {
            let s = g.data()[0];
            let (ar, ac) = val(*a).shape();
            let mut ga = Tensor::zeros(ar, ac);
            for (o, &v) in ga.data_mut()[i * ac..(i + 1) * ac]
                .iter_mut()
                .zip(val(*b).row(*j))
            {
                *o = s * v;
            }
            accumulate(grads, *a, ga);
            let (br, bc) = val(*b).shape();
            let mut gb = Tensor::zeros(br, bc);
            for (o, &v) in gb.data_mut()[j * bc..(j + 1) * bc]
                .iter_mut()
                .zip(val(*a).row(*i))
            {
                *o = s * v;
            }
            accumulate(grads, *b, gb);
        }
        Op::LogSoftmaxRows(a) => {
            // d/dx log softmax: g - softmax · rowsum(g)
            let y = &node.value;
            let m = y.cols();
            let mut out = g.clone();
            for r in 0..y.rows() {
                let gs = g.row(r).iter().fold(0.0, |s, &v| s + v);
                for c in 0..m {
                    out.data_mut()[r * m + c] -= y.get(r, c).exp() * gs;
                }
            }
            accumulate(grads, *a, out);
        }
        Op::StackRows(parts) => {
            let c = g.cols();
            let mut offset = 0;
            for &p in parts {
                let rows = val(p).rows();
                let slice = g.data()[offset * c..(offset + rows) * c].to_vec();
                accumulate(grads, p, Tensor::from_raw(rows, c, slice));
                offset += rows;
            }
        }
    }
}

/// Gradients of one scalar root with respect to every node recorded before it.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the root does not depend on it.
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient for `var`, with zeros when the root does not depend on it.
    pub fn wrt(&self, var: &Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = var.shape();
                Tensor::zeros(r, c)
            }
        }
    }
}
