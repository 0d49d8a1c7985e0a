//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the tape in evaluation order, so the
//! reverse of the tape is a valid order for propagating gradients. A graph
//! is built for one loss evaluation, consumed by [`Graph::backward`] and
//! then discarded or [`Graph::reset`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Layout, Tensor};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// Optimizer group a parameter belongs to; gate logits get their own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Weight,
    Gate,
}

/// A named learnable tensor with a process-unique identity.
#[derive(Clone, Debug)]
pub struct Param {
    id: ParamId,
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    pub group: ParamGroup,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            id: ParamId::fresh(),
            name: name.into(),
            value,
            trainable: true,
            group: ParamGroup::Weight,
        }
    }

    pub fn gate(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            group: ParamGroup::Gate,
            ..Param::new(name, value)
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the second operand of a binary op is expanded to the first's shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    /// Vector of length `cols` repeated over every row of a matrix.
    Row,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: Layout, tb: Layout },
    Add { a: Var, b: Var, bc: Bcast },
    Mul { a: Var, b: Var, bc: Bcast },
    Affine { a: Var, scale: f64 },
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Abs(Var),
    Clamp { a: Var, lo: f64, hi: f64 },
    Sum(Var),
    IndexRows { a: Var, idx: Vec<usize> },
    SelectCols { a: Var, idx: Vec<usize> },
    SliceRows { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    ScatterRows { a: Var, pos: Vec<usize> },
    SoftmaxXent { logits: Var, targets: Vec<usize>, probs: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears the tape so the graph can be rebuilt.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.params.clear();
        self.consumed = false;
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

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient accumulated for a bound parameter after [`Graph::backward`].
    pub fn param_grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.grad(*v))
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        self.nodes.push(Node {
            value,
            op: node_op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// Leaf for a parameter; binding the same parameter twice yields the same node.
    pub fn param(&mut self, p: &Param) -> Result<Var> {
        if let Some(v) = self.params.get(&p.id) {
            return Ok(*v);
        }
        let v = self.push("param", p.value.clone(), Op::Leaf, p.trainable)?;
        self.params.insert(p.id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.gemm(a, Layout::Normal, b, Layout::Normal)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.gemm(a, Layout::Normal, b, Layout::Transposed)
    }

    fn gemm(&mut self, a: Var, ta: Layout, b: Var, tb: Layout) -> Result<Var> {
        let value = gemm(self.value(a), ta, self.value(b), tb)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", value, Op::MatMul { a, b, ta, tb }, rg)
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Bcast::Same)
        } else if self.value(b).numel() == 1 {
            Ok(Bcast::Scalar)
        } else if sa.len() == 2 && sb.len() == 1 && sb[0] == sa[1] {
            Ok(Bcast::Row)
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    /// Orders operands so the second one is the broadcast side.
    fn order_operands(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var, Bcast)> {
        match self.broadcast_kind(op, a, b) {
            Ok(bc) => Ok((a, b, bc)),
            Err(e) => match self.broadcast_kind(op, b, a) {
                Ok(bc) => Ok((b, a, bc)),
                Err(_) => Err(e),
            },
        }
    }

    fn zip_bcast(&self, a: Var, b: Var, bc: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let tb = self.value(b).data();
        let mut out = ta.clone();
        match bc {
            Bcast::Same => out.data_mut().iter_mut().zip(tb).for_each(|(x, y)| *x = f(*x, *y)),
            Bcast::Scalar => out.data_mut().iter_mut().for_each(|x| *x = f(*x, tb[0])),
            Bcast::Row => {
                let cols = tb.len();
                for row in out.data_mut().chunks_mut(cols.max(1)) {
                    row.iter_mut().zip(tb).for_each(|(x, y)| *x = f(*x, *y));
                }
            }
        }
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, bc) = self.order_operands("add", a, b)?;
        let value = self.zip_bcast(a, b, bc, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push("add", value, Op::Add { a, b, bc }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, bc) = self.order_operands("mul", a, b)?;
        let value = self.zip_bcast(a, b, bc, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", value, Op::Mul { a, b, bc }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// `scale · a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let value = self.value(a).map(|x| scale * x + shift);
        let rg = self.rg(a);
        self.push("affine", value, Op::Affine { a, scale }, rg)
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Result<Var> {
        self.affine(a, scale, 0.0)
    }

    pub fn add_scalar(&mut self, a: Var, shift: f64) -> Result<Var> {
        self.affine(a, 1.0, shift)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push("sigmoid", value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push("tanh", value, Op::Tanh(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|x| **x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push("log", value, Op::Log(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push("abs", value, Op::Abs(a), rg)
    }

    /// Elementwise clamp. The gradient is one strictly inside `(lo, hi)` and
    /// zero elsewhere, including at the boundaries themselves.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::Invalid(format!("clamp bounds {lo} > {hi}")));
        }
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push("clamp", value, Op::Clamp { a, lo, hi }, rg)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push("sum", value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Gathers rows (or vector elements); indices may repeat.
    pub fn index_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let rows = if t.rank() == 1 { t.numel() } else { t.dims2().0 };
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Index { index: bad, len: rows });
        }
        let value = t.select_rows(idx);
        let rg = self.rg(a);
        self.push("index_rows", value, Op::IndexRows { a, idx: idx.to_vec() }, rg)
    }

    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::shape("select_cols", t.shape(), &[idx.len()]));
        }
        let cols = t.shape()[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(Error::Index { index: bad, len: cols });
        }
        let value = t.select_cols(idx);
        let rg = self.rg(a);
        self.push("select_cols", value, Op::SelectCols { a, idx: idx.to_vec() }, rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.dims2();
        if t.rank() != 2 || start + len > rows {
            return Err(Error::shape("slice_rows", t.shape(), &[start, len]));
        }
        let value = Tensor::matrix(len, cols, t.data()[start * cols..(start + len) * cols].to_vec())?;
        let rg = self.rg(a);
        self.push("slice_rows", value, Op::SliceRows { a, start }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Invalid("concat_rows of nothing".into()))?;
        let cols = self.value(first).dims2().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.shape()[1] != cols {
                return Err(Error::shape("concat_rows", self.shape(first), t.shape()));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows, cols, data)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Places row `i` of `a` at row `pos[i]` of an `n_rows`-row zero matrix.
    pub fn scatter_rows(&mut self, a: Var, pos: &[usize], n_rows: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.dims2();
        if t.rank() != 2 || rows != pos.len() {
            return Err(Error::shape("scatter_rows", t.shape(), &[pos.len()]));
        }
        let mut out = Tensor::zeros(&[n_rows, cols]);
        for (i, &p) in pos.iter().enumerate() {
            if p >= n_rows {
                return Err(Error::Index { index: p, len: n_rows });
            }
            out.data_mut()[p * cols..(p + 1) * cols].copy_from_slice(t.row(i));
        }
        let rg = self.rg(a);
        self.push("scatter_rows", out, Op::ScatterRows { a, pos: pos.to_vec() }, rg)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, cols) = t.dims2();
        if t.rank() != 2 || rows != targets.len() {
            return Err(Error::shape("softmax_cross_entropy", t.shape(), &[targets.len()]));
        }
        let mut probs = Tensor::zeros(&[rows, cols]);
        let mut nll = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            if y >= cols {
                return Err(Error::Index { index: y, len: cols });
            }
            let row = t.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            let prow = &mut probs.data_mut()[i * cols..(i + 1) * cols];
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            prow.iter_mut().for_each(|p| *p /= z);
            nll += z.ln() - (row[y] - max);
        }
        let value = Tensor::scalar(nll / rows.max(1) as f64);
        let rg = self.rg(logits);
        self.push(
            "softmax_cross_entropy",
            value,
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Propagates gradients from a scalar loss to every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Backward("graph already differentiated; reset before reuse".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Backward("empty graph".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            let contributions = self.local_grads(i, &g)?;
            self.grads[i] = Some(g);
            for (parent, pg) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut self.grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        use Layout::{Normal as N, Transposed as T};
        let node = &self.nodes[i];
        let out = &node.value;
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        let grads = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut v = Vec::with_capacity(2);
                if wants(a) {
                    let da = match (ta, tb) {
                        (N, N) => gemm(g, N, vb, T)?,
                        (N, T) => gemm(g, N, vb, N)?,
                        (T, N) => gemm(vb, N, g, T)?,
                        (T, T) => gemm(vb, T, g, T)?,
                    };
                    v.push((*a, da));
                }
                if wants(b) {
                    let db = match (ta, tb) {
                        (N, N) => gemm(va, T, g, N)?,
                        (N, T) => gemm(g, T, va, N)?,
                        (T, N) => gemm(va, N, g, N)?,
                        (T, T) => gemm(g, T, va, T)?,
                    };
                    v.push((*b, db));
                }
                v
            }
            Op::Add { a, b, bc } => {
                vec![(*a, g.clone()), (*b, reduce_bcast(g, *bc, self.value(*b)))]
            }
            Op::Mul { a, b, bc } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let mut v = Vec::with_capacity(2);
                if wants(a) {
                    v.push((*a, self.zip_bcast_tensor(g, vb, *bc, |x, y| x * y)));
                }
                if wants(b) {
                    let mut ga = g.clone();
                    ga.data_mut().iter_mut().zip(va.data()).for_each(|(x, y)| *x *= y);
                    v.push((*b, reduce_bcast(&ga, *bc, vb)));
                }
                v
            }
            Op::Affine { a, scale } => vec![(*a, g.map(|x| x * scale))],
            Op::Sigmoid(a) => vec![(*a, zip(g, out, |gi, s| gi * s * (1.0 - s)))],
            Op::Tanh(a) => vec![(*a, zip(g, out, |gi, t| gi * (1.0 - t * t)))],
            Op::Log(a) => vec![(*a, zip(g, self.value(*a), |gi, x| gi / x))],
            Op::Abs(a) => vec![(*a, zip(g, self.value(*a), |gi, x| gi * sign(x)))],
            Op::Clamp { a, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                vec![(
                    *a,
                    zip(g, self.value(*a), |gi, x| if x > lo && x < hi { gi } else { 0.0 }),
                )]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(self.shape(*a), g.item()))],
            Op::IndexRows { a, idx } => {
                let src = self.value(*a);
                let mut acc = Tensor::zeros(src.shape());
                let cols = if src.rank() == 1 { 1 } else { src.dims2().1 };
                for (k, &r) in idx.iter().enumerate() {
                    let dst = &mut acc.data_mut()[r * cols..(r + 1) * cols];
                    dst.iter_mut()
                        .zip(&g.data()[k * cols..(k + 1) * cols])
                        .for_each(|(d, s)| *d += s);
                }
                vec![(*a, acc)]
            }
            Op::SelectCols { a, idx } => {
                let src = self.value(*a);
                let (rows, cols) = src.dims2();
                let mut acc = Tensor::zeros(src.shape());
                let k = idx.len();
                for r in 0..rows {
                    for (j, &c) in idx.iter().enumerate() {
                        acc.data_mut()[r * cols + c] += g.data()[r * k + j];
                    }
                }
                vec![(*a, acc)]
            }
            Op::SliceRows { a, start } => {
                let src = self.value(*a);
                let cols = src.dims2().1;
                let mut acc = Tensor::zeros(src.shape());
                acc.data_mut()[start * cols..start * cols + g.numel()].copy_from_slice(g.data());
                vec![(*a, acc)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut v = Vec::with_capacity(parts.len());
                for p in parts {
                    let n = self.value(*p).numel();
                    let piece = Tensor::new(self.shape(*p), g.data()[offset..offset + n].to_vec())?;
                    offset += n;
                    v.push((*p, piece));
                }
                v
            }
            Op::ScatterRows { a, pos } => vec![(*a, g.select_rows(pos))],
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let (rows, cols) = probs.dims2();
                let scale = g.item() / rows.max(1) as f64;
                let mut d = probs.clone();
                for (i, &y) in targets.iter().enumerate() {
                    d.data_mut()[i * cols + y] -= 1.0;
                }
                d.data_mut().iter_mut().for_each(|x| *x *= scale);
                vec![(*logits, d)]
            }
        };
        Ok(grads)
    }

    fn zip_bcast_tensor(&self, a: &Tensor, b: &Tensor, bc: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let mut out = a.clone();
        let tb = b.data();
        match bc {
            Bcast::Same => out.data_mut().iter_mut().zip(tb).for_each(|(x, y)| *x = f(*x, *y)),
            Bcast::Scalar => out.data_mut().iter_mut().for_each(|x| *x = f(*x, tb[0])),
            Bcast::Row => {
                for row in out.data_mut().chunks_mut(tb.len().max(1)) {
                    row.iter_mut().zip(tb).for_each(|(x, y)| *x = f(*x, *y));
                }
            }
        }
        out
    }
}

fn reduce_bcast(g: &Tensor, bc: Bcast, target: &Tensor) -> Tensor {
    match bc {
        Bcast::Same => g.clone(),
        Bcast::Scalar => Tensor::full(target.shape(), g.sum()),
        Bcast::Row => {
            let cols = target.numel();
            let mut acc = vec![0.0; cols];
            for row in g.data().chunks(cols.max(1)) {
                acc.iter_mut().zip(row).for_each(|(a, x)| *a += x);
            }
            Tensor::new(target.shape(), acc).expect("row reduction keeps target shape")
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = a.clone();
    out.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x = f(*x, *y));
    out
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_weights_has_unit_gradient() {
        let w = Param::new("w", Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap());
        let mut g = Graph::new();
        let v = g.param(&w).unwrap();
        let loss = g.sum(v).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.param_grad(w.id()).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let w = Param::new("w", Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let mut g = Graph::new();
        let v = g.param(&w).unwrap();
        let sq = g.square(v).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.param_grad(w.id()).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0)).unwrap();
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn clamp_saturates_with_zero_gradient() {
        let p = Param::new("x", Tensor::vector(vec![1.3, 0.5, 0.0, 1.0]));
        let mut g = Graph::new();
        let x = g.param(&p).unwrap();
        let c = g.clamp(x, 0.0, 1.0).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 0.5, 0.0, 1.0]);
        let loss = g.sum(c).unwrap();
        g.backward(loss).unwrap();
        // boundaries count as saturated
        assert_eq!(g.param_grad(p.id()).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert!(matches!(g.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1e308)).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn backward_requires_scalar_and_fresh_graph() {
        let w = Param::new("w", Tensor::vector(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let v = g.param(&w).unwrap();
        assert!(g.backward(v).is_err());
        let s = g.sum(v).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Backward(_))));
        g.reset();
        let v = g.param(&w).unwrap();
        let s = g.sum(v).unwrap();
        assert!(g.backward(s).is_ok());
        assert!(Graph::new().backward(Var(0)).is_err());
    }

    #[test]
    fn row_broadcast_reduces_gradient_over_rows() {
        let x = Param::new("x", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = Param::new("b", Tensor::vector(vec![10.0, 20.0]));
        let mut g = Graph::new();
        let xv = g.param(&x).unwrap();
        let bv = g.param(&b).unwrap();
        let y = g.mul(bv, xv).unwrap();
        assert_eq!(g.value(y).data(), &[10.0, 40.0, 30.0, 80.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.param_grad(b.id()).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(g.param_grad(x.id()).unwrap().data(), &[10.0, 20.0, 10.0, 20.0]);
    }

    #[test]
    fn unsupported_broadcast_is_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn reachable_nodes_get_matching_gradients() {
        let a = Param::new("a", Tensor::matrix(2, 3, (0..6).map(|i| i as f64 * 0.1).collect()).unwrap());
        let b = Param::new("b", Tensor::matrix(3, 2, (0..6).map(|i| 1.0 - i as f64 * 0.2).collect()).unwrap());
        let mut g = Graph::new();
        let av = g.param(&a).unwrap();
        let bv = g.param(&b).unwrap();
        let c = g.matmul(av, bv).unwrap();
        let t = g.tanh(c).unwrap();
        let loss = g.softmax_cross_entropy(t, &[1, 0]).unwrap();
        g.backward(loss).unwrap();
        for v in [av, bv, c, t, loss] {
            assert_eq!(g.grad(v).unwrap().shape(), g.shape(v));
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_classes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 8])).unwrap();
        let l = g.softmax_cross_entropy(x, &[0, 3, 7]).unwrap();
        assert!((g.value(l).item() - 8f64.ln()).abs() < 1e-15);
    }
}
