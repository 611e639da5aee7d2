use std::cell::{Cell, RefCell};

use super::{matmul_into, Real, Tensor};
use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;
/// Upper clamp for `p` inside `log(1 - p)`.
pub(crate) const LOG1M_CLAMP: f64 = 1.0 - 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rank-1 rhs of length `cols`, repeated over lhs rows
    Row,
    /// one-element rhs
    Scalar,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Scale(usize, F),
    Relu(usize),
    Gelu(usize),
    Exp(usize),
    Log(usize),
    Log1m(usize),
    Softmax(usize),
    LogSoftmax(usize),
    RmsNorm { x: usize, gain: usize, eps: F },
    GatherRows { table: usize, ids: Vec<usize> },
    SliceCols { src: usize, start: usize },
    SliceRows { src: usize, start: usize },
    ConcatCols(Vec<usize>),
    Concat(Vec<usize>),
    Pick { src: usize, idx: Vec<usize> },
    Gather { src: usize, idx: Vec<usize> },
    SegmentSums { src: usize, lens: Vec<usize> },
    RepeatRows(usize),
    Sum(usize),
    Mean(usize),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Records operations as they are executed so gradients can be replayed in
/// reverse. One tape serves one forward pass and one call to
/// [`Tape::backward`].
pub struct Tape<F> {
    nodes: RefCell<Vec<Node<F>>>,
    finished: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradients of a scalar loss with respect to the trainable leaves of a tape.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// `None` when `var` is not trainable or the loss does not depend on it.
    pub fn get(&self, var: Var<'_, F>) -> Option<&Tensor<F>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_, F>) -> Option<Tensor<F>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(1024)),
            finished: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor<F>, trainable: bool) -> Var<'_, F> {
        self.push(value, Op::Leaf, trainable)
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, op, needs_grad });
        Var { tape: self, id }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Concatenates rank-1 parts into one vector, or stacks rank-2 parts
    /// with equal column counts along rows.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, F>]) -> Result<Var<'t, F>> {
        let Some(first) = parts.first() else {
            return Err(Error::Contract("concat of zero tensors".into()));
        };
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let head = &nodes[first.id].value;
            let mut data = Vec::new();
            let mut rows = 0;
            for &i in &ids {
                let t = &nodes[i].value;
                if t.rank() != head.rank() || (head.rank() == 2 && t.cols() != head.cols()) {
                    return Err(Error::shape("concat", head.shape(), t.shape()));
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            if head.rank() == 1 {
                Tensor::vector(data)?
            } else {
                Tensor::matrix(rows, head.cols(), data)?
            }
        };
        let ng = self.needs(&ids);
        Ok(self.push(value, Op::Concat(ids), ng))
    }

    /// Joins rank-2 parts with equal row counts side by side.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t, F>]) -> Result<Var<'t, F>> {
        let Some(first) = parts.first() else {
            return Err(Error::Contract("concat_cols of zero tensors".into()));
        };
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[first.id].value.dims2("concat_cols")?.0;
            let mut total = 0;
            for &i in &ids {
                let (r, c) = nodes[i].value.dims2("concat_cols")?;
                if r != rows {
                    return Err(Error::shape(
                        "concat_cols",
                        nodes[first.id].value.shape(),
                        nodes[i].value.shape(),
                    ));
                }
                total += c;
            }
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &i in &ids {
                    data.extend_from_slice(nodes[i].value.row(r));
                }
            }
            Tensor::matrix(rows, total, data)?
        };
        let ng = self.needs(&ids);
        Ok(self.push(value, Op::ConcatCols(ids), ng))
    }

    /// Reverse pass from a one-element `loss`. A tape can be differentiated
    /// once.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        if self.finished.get() {
            return Err(Error::State("backward already called on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        self.finished.set(true);

        let mut grads: Vec<Option<Tensor<F>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape())?);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads)?;
        }
        // Only leaves keep their gradients.
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Tensor<F>>], id: usize, delta: Tensor<F>) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += *d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn backprop_node<F: Real>(nodes: &[Node<F>], id: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
    let out = &nodes[id].value;
    let wants = |i: usize| nodes[i].needs_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = av.dims2("matmul")?;
            let n = bv.cols();
            if wants(*a) {
                // g[m×n] · bᵀ[n×k]
                let mut d = vec![F::zero(); m * k];
                for i in 0..m {
                    let g_row = g.row(i);
                    for p in 0..k {
                        let b_row = bv.row(p);
                        d[i * k + p] = g_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
                    }
                }
                accumulate(grads, *a, Tensor::matrix(m, k, d)?);
            }
            if wants(*b) {
                // aᵀ[k×m] · g[m×n]
                let at = av.transpose()?;
                let mut d = vec![F::zero(); k * n];
                matmul_into(at.data(), g.data(), &mut d, k, m, n);
                accumulate(grads, *b, Tensor::matrix(k, n, d)?);
            }
        }
        Op::Transpose(a) => {
            if wants(*a) {
                accumulate(grads, *a, g.transpose()?);
            }
        }
        Op::Add(a, b, bc) => {
            if wants(*a) {
                accumulate(grads, *a, g.clone());
            }
            if wants(*b) {
                let bshape = nodes[*b].value.shape();
                let d = reduce_broadcast(g, *bc, bshape)?;
                accumulate(grads, *b, d);
            }
        }
        Op::Mul(a, b, bc) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let cols = av.cols();
            if wants(*a) {
                let d: Vec<F> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * broadcast_at(bv, *bc, i, cols))
                    .collect();
                accumulate(grads, *a, Tensor::new(av.shape(), d)?);
            }
            if wants(*b) {
                let prod: Vec<F> = g.data().iter().zip(av.data()).map(|(&gi, &ai)| gi * ai).collect();
                let prod = Tensor::new(av.shape(), prod)?;
                accumulate(grads, *b, reduce_broadcast(&prod, *bc, bv.shape())?);
            }
        }
        Op::Scale(a, c) => {
            if wants(*a) {
                accumulate(grads, *a, g.map(|x| x * *c));
            }
        }
        Op::Relu(a) => {
            if wants(*a) {
                let x = &nodes[*a].value;
                let d = zip_map(g, x, |gi, xi| if xi > F::zero() { gi } else { F::zero() });
                accumulate(grads, *a, d);
            }
        }
        Op::Gelu(a) => {
            if wants(*a) {
                let x = &nodes[*a].value;
                accumulate(grads, *a, zip_map(g, x, |gi, xi| gi * gelu_grad(xi)));
            }
        }
        Op::Exp(a) => {
            if wants(*a) {
                accumulate(grads, *a, zip_map(g, out, |gi, yi| gi * yi));
            }
        }
        Op::Log(a) => {
            if wants(*a) {
                let x = &nodes[*a].value;
                accumulate(grads, *a, zip_map(g, x, |gi, xi| gi / xi));
            }
        }
        Op::Log1m(a) => {
            if wants(*a) {
                // Straight-through the clamp: saturated tokens keep a gradient.
                let x = &nodes[*a].value;
                let hi = F::lit(LOG1M_CLAMP);
                accumulate(grads, *a, zip_map(g, x, |gi, xi| -gi / (F::one() - xi.min(hi))));
            }
        }
        Op::Softmax(a) => {
            if wants(*a) {
                let cols = out.cols();
                let mut d = vec![F::zero(); out.len()];
                for r in 0..out.rows() {
                    let s = out.row(r);
                    let gr = g.row(r);
                    let dot: F = s.iter().zip(gr).map(|(&si, &gi)| si * gi).sum();
                    for j in 0..cols {
                        d[r * cols + j] = s[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *a, Tensor::new(out.shape(), d)?);
            }
        }
        Op::LogSoftmax(a) => {
            if wants(*a) {
                let cols = out.cols();
                let mut d = vec![F::zero(); out.len()];
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let gsum: F = gr.iter().copied().sum();
                    for j in 0..cols {
                        d[r * cols + j] = gr[j] - y[j].exp() * gsum;
                    }
                }
                accumulate(grads, *a, Tensor::new(out.shape(), d)?);
            }
        }
        Op::RmsNorm { x, gain, eps } => {
            let xv = &nodes[*x].value;
            let gv = &nodes[*gain].value;
            let cols = xv.cols();
            let n = F::from_usize(cols).expect("usize fits");
            let mut dx = vec![F::zero(); xv.len()];
            let mut dgain = vec![F::zero(); cols];
            for r in 0..xv.rows() {
                let xr = xv.row(r);
                let gr = g.row(r);
                let ms: F = xr.iter().map(|&v| v * v).sum::<F>() / n;
                let inv = F::one() / (ms + *eps).sqrt();
                let mut dot = F::zero();
                for j in 0..cols {
                    let gg = gr[j] * gv.data()[j];
                    dot += gg * xr[j];
                    dgain[j] += gr[j] * xr[j] * inv;
                }
                let inv3 = inv * inv * inv;
                for j in 0..cols {
                    let gg = gr[j] * gv.data()[j];
                    dx[r * cols + j] = inv * gg - xr[j] * inv3 * dot / n;
                }
            }
            if wants(*x) {
                accumulate(grads, *x, Tensor::new(xv.shape(), dx)?);
            }
            if wants(*gain) {
                accumulate(grads, *gain, Tensor::new(gv.shape(), dgain)?);
            }
        }
        Op::GatherRows { table, ids } => {
            if wants(*table) {
                let tv = &nodes[*table].value;
                let cols = tv.cols();
                let mut d = vec![F::zero(); tv.len()];
                for (r, &tok) in ids.iter().enumerate() {
                    for j in 0..cols {
                        d[tok * cols + j] += g.at(r, j);
                    }
                }
                accumulate(grads, *table, Tensor::new(tv.shape(), d)?);
            }
        }
        Op::SliceCols { src, start } => {
            if wants(*src) {
                let sv = &nodes[*src].value;
                let (rows, cols) = sv.dims2("slice_cols")?;
                let w = out.cols();
                let mut d = vec![F::zero(); sv.len()];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
                }
                accumulate(grads, *src, Tensor::new(sv.shape(), d)?);
            }
        }
        Op::SliceRows { src, start } => {
            if wants(*src) {
                let sv = &nodes[*src].value;
                let cols = sv.cols();
                let mut d = vec![F::zero(); sv.len()];
                d[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                accumulate(grads, *src, Tensor::new(sv.shape(), d)?);
            }
        }
        Op::ConcatCols(ids) => {
            let mut offset = 0;
            for &i in ids {
                let pv = &nodes[i].value;
                let w = pv.cols();
                if wants(i) {
                    let mut d = Vec::with_capacity(pv.len());
                    for r in 0..pv.rows() {
                        d.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    accumulate(grads, i, Tensor::new(pv.shape(), d)?);
                }
                offset += w;
            }
        }
        Op::Concat(ids) => {
            let mut offset = 0;
            for &i in ids {
                let pv = &nodes[i].value;
                let n = pv.len();
                if wants(i) {
                    let d = g.data()[offset..offset + n].to_vec();
                    accumulate(grads, i, Tensor::new(pv.shape(), d)?);
                }
                offset += n;
            }
        }
        Op::Pick { src, idx } => {
            if wants(*src) {
                let sv = &nodes[*src].value;
                let cols = sv.cols();
                let mut d = vec![F::zero(); sv.len()];
                for (r, &j) in idx.iter().enumerate() {
                    d[r * cols + j] += g.data()[r];
                }
                accumulate(grads, *src, Tensor::new(sv.shape(), d)?);
            }
        }
        Op::Gather { src, idx } => {
            if wants(*src) {
                let sv = &nodes[*src].value;
                let mut d = vec![F::zero(); sv.len()];
                for (&i, &gv) in idx.iter().zip(g.data()) {
                    d[i] += gv;
                }
                accumulate(grads, *src, Tensor::new(sv.shape(), d)?);
            }
        }
        Op::SegmentSums { src, lens } => {
            if wants(*src) {
                let sv = &nodes[*src].value;
                let mut d = Vec::with_capacity(sv.len());
                for (&len, &gv) in lens.iter().zip(g.data()) {
                    d.extend(std::iter::repeat_n(gv, len));
                }
                accumulate(grads, *src, Tensor::new(sv.shape(), d)?);
            }
        }
        Op::RepeatRows(src) => {
            if wants(*src) {
                let sv = &nodes[*src].value;
                accumulate(grads, *src, column_sums(g, sv.shape())?);
            }
        }
        Op::Sum(a) => {
            if wants(*a) {
                let gv = g.data()[0];
                accumulate(grads, *a, Tensor::full(nodes[*a].value.shape(), gv)?);
            }
        }
        Op::Mean(a) => {
            if wants(*a) {
                let av = &nodes[*a].value;
                let gv = g.data()[0] / F::from_usize(av.len()).expect("usize fits");
                accumulate(grads, *a, Tensor::full(av.shape(), gv)?);
            }
        }
    }
    Ok(())
}

fn zip_map<F: Real>(g: &Tensor<F>, x: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

fn broadcast_at<F: Real>(b: &Tensor<F>, bc: Broadcast, flat: usize, cols: usize) -> F {
    match bc {
        Broadcast::Same => b.data()[flat],
        Broadcast::Row => b.data()[flat % cols],
        Broadcast::Scalar => b.data()[0],
    }
}

fn column_sums<F: Real>(g: &Tensor<F>, shape: &[usize]) -> Result<Tensor<F>> {
    let cols = g.cols();
    let mut d = vec![F::zero(); cols];
    for r in 0..g.rows() {
        for (acc, &v) in d.iter_mut().zip(g.row(r)) {
            *acc += v;
        }
    }
    Tensor::new(shape, d)
}

fn reduce_broadcast<F: Real>(g: &Tensor<F>, bc: Broadcast, shape: &[usize]) -> Result<Tensor<F>> {
    match bc {
        Broadcast::Same => Ok(g.clone()),
        Broadcast::Row => column_sums(g, shape),
        Broadcast::Scalar => Tensor::new(shape, vec![g.sum()]),
    }
}

pub(crate) fn gelu<F: Real>(x: F) -> F {
    let c = F::lit(SQRT_2_OVER_PI);
    let k = F::lit(GELU_CUBIC);
    let half = F::lit(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::lit(SQRT_2_OVER_PI);
    let k = F::lit(GELU_CUBIC);
    let half = F::lit(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * k * x * x)
}

pub(crate) fn softmax_rows<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let cols = x.cols();
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let row = x.row(r);
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        let start = out.len();
        let mut total = F::zero();
        for &v in row {
            let e = (v - m).exp();
            total += e;
            out.push(e);
        }
        for o in &mut out[start..start + cols] {
            *o /= total;
        }
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

pub(crate) fn log_softmax_rows<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let row = x.row(r);
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

// Arithmetic is fallible (shape checks), so the std operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t, F: Real> Var<'t, F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn value(&self) -> Tensor<F> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<F>) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn item(&self) -> Result<F> {
        self.with_value(Tensor::item)
    }

    fn unary(self, op: impl FnOnce(usize) -> Op<F>, f: impl FnOnce(&Tensor<F>) -> Result<Tensor<F>>) -> Result<Self> {
        let value = self.with_value(f)?;
        let ng = self.tape.needs(&[self.id]);
        Ok(self.tape.push(value, op(self.id), ng))
    }

    fn check_same_tape(&self, other: &Self) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    pub fn matmul(self, rhs: Self) -> Result<Self> {
        self.check_same_tape(&rhs);
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.matmul(&nodes[rhs.id].value)?
        };
        let ng = self.tape.needs(&[self.id, rhs.id]);
        Ok(self.tape.push(value, Op::MatMul(self.id, rhs.id), ng))
    }

    pub fn transpose(self) -> Result<Self> {
        self.unary(Op::Transpose, Tensor::transpose)
    }

    fn broadcast_kind(lhs: &Tensor<F>, rhs: &Tensor<F>, op: &'static str) -> Result<Broadcast> {
        if lhs.shape() == rhs.shape() {
            Ok(Broadcast::Same)
        } else if rhs.len() == 1 {
            Ok(Broadcast::Scalar)
        } else if lhs.rank() == 2 && rhs.rank() == 1 && rhs.len() == lhs.cols() {
            Ok(Broadcast::Row)
        } else {
            Err(Error::shape(op, lhs.shape(), rhs.shape()))
        }
    }

    fn binary(self, rhs: Self, name: &'static str, mul: bool) -> Result<Self> {
        self.check_same_tape(&rhs);
        let (value, bc) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[rhs.id].value;
            let bc = Self::broadcast_kind(a, b, name)?;
            let cols = a.cols();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = broadcast_at(b, bc, i, cols);
                    if mul {
                        x * y
                    } else {
                        x + y
                    }
                })
                .collect();
            (Tensor::new(a.shape(), data)?, bc)
        };
        let ng = self.tape.needs(&[self.id, rhs.id]);
        let op = if mul {
            Op::Mul(self.id, rhs.id, bc)
        } else {
            Op::Add(self.id, rhs.id, bc)
        };
        Ok(self.tape.push(value, op, ng))
    }

    /// Elementwise sum; `rhs` may be the same shape, a row vector, or a scalar.
    pub fn add(self, rhs: Self) -> Result<Self> {
        self.binary(rhs, "add", false)
    }

    /// Elementwise product with the same broadcasting as [`Var::add`].
    pub fn mul(self, rhs: Self) -> Result<Self> {
        self.binary(rhs, "mul", true)
    }

    pub fn sub(self, rhs: Self) -> Result<Self> {
        self.add(rhs.scale(-F::one())?)
    }

    pub fn scale(self, c: F) -> Result<Self> {
        self.unary(|a| Op::Scale(a, c), |t| Ok(t.map(|x| x * c)))
    }

    pub fn neg(self) -> Result<Self> {
        self.scale(-F::one())
    }

    pub fn relu(self) -> Result<Self> {
        self.unary(Op::Relu, |t| Ok(t.map(|x| x.max(F::zero()))))
    }

    pub fn gelu(self) -> Result<Self> {
        self.unary(Op::Gelu, |t| Ok(t.map(gelu)))
    }

    pub fn exp(self) -> Result<Self> {
        self.unary(Op::Exp, |t| Ok(t.map(F::exp)))
    }

    pub fn ln(self) -> Result<Self> {
        self.unary(Op::Log, |t| Ok(t.map(F::ln)))
    }

    /// `log(1 - p)` with `p` clamped to at most `1 - 1e-12`.
    pub fn log1m(self) -> Result<Self> {
        let hi = F::lit(LOG1M_CLAMP);
        self.unary(Op::Log1m, |t| Ok(t.map(|p| (-p.min(hi)).ln_1p())))
    }

    /// Softmax over the last dimension. NaN inputs propagate to NaN outputs.
    pub fn softmax(self) -> Result<Self> {
        self.unary(Op::Softmax, |t| Ok(softmax_rows(t)))
    }

    pub fn log_softmax(self) -> Result<Self> {
        self.unary(Op::LogSoftmax, |t| Ok(log_softmax_rows(t)))
    }

    /// Root-mean-square normalisation of each row followed by a per-column gain.
    pub fn rms_norm(self, gain: Self, eps: F) -> Result<Self> {
        self.check_same_tape(&gain);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let g = &nodes[gain.id].value;
            if g.rank() != 1 || g.len() != x.cols() {
                return Err(Error::shape("rms_norm", x.shape(), g.shape()));
            }
            let n = F::from_usize(x.cols()).expect("usize fits");
            let mut out = Vec::with_capacity(x.len());
            for r in 0..x.rows() {
                let row = x.row(r);
                let ms: F = row.iter().map(|&v| v * v).sum::<F>() / n;
                let inv = F::one() / (ms + eps).sqrt();
                out.extend(row.iter().zip(g.data()).map(|(&v, &gj)| v * inv * gj));
            }
            Tensor::new(x.shape(), out)?
        };
        let ng = self.tape.needs(&[self.id, gain.id]);
        Ok(self.tape.push(
            value,
            Op::RmsNorm {
                x: self.id,
                gain: gain.id,
                eps,
            },
            ng,
        ))
    }

    /// Rows `ids` of a `[n, d]` table, as a `[ids.len(), d]` matrix.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Self> {
        let ids_owned = ids.to_vec();
        self.unary(
            |a| Op::GatherRows {
                table: a,
                ids: ids_owned,
            },
            |t| {
                let (n, d) = t.dims2("gather_rows")?;
                if ids.is_empty() {
                    return Err(Error::Contract("gather_rows with no ids".into()));
                }
                let mut data = Vec::with_capacity(ids.len() * d);
                for &i in ids {
                    if i >= n {
                        return Err(Error::shape("gather_rows", t.shape(), &[i]));
                    }
                    data.extend_from_slice(t.row(i));
                }
                Tensor::matrix(ids.len(), d, data)
            },
        )
    }

    pub fn slice_cols(self, start: usize, width: usize) -> Result<Self> {
        self.unary(
            |a| Op::SliceCols { src: a, start },
            |t| {
                let (r, c) = t.dims2("slice_cols")?;
                if width == 0 || start + width > c {
                    return Err(Error::shape("slice_cols", t.shape(), &[start, width]));
                }
                let mut data = Vec::with_capacity(r * width);
                for i in 0..r {
                    data.extend_from_slice(&t.row(i)[start..start + width]);
                }
                Tensor::matrix(r, width, data)
            },
        )
    }

    pub fn slice_rows(self, start: usize, count: usize) -> Result<Self> {
        self.unary(
            |a| Op::SliceRows { src: a, start },
            |t| {
                let (r, c) = t.dims2("slice_rows")?;
                if count == 0 || start + count > r {
                    return Err(Error::shape("slice_rows", t.shape(), &[start, count]));
                }
                Tensor::matrix(count, c, t.data()[start * c..(start + count) * c].to_vec())
            },
        )
    }

    /// `out[i] = self[i, idx[i]]` as a rank-1 tensor.
    pub fn pick(self, idx: &[usize]) -> Result<Self> {
        let owned = idx.to_vec();
        self.unary(
            |a| Op::Pick { src: a, idx: owned },
            |t| {
                let c = t.cols();
                if idx.len() != t.rows() || idx.iter().any(|&j| j >= c) {
                    return Err(Error::shape("pick", t.shape(), &[idx.len()]));
                }
                Tensor::vector(idx.iter().enumerate().map(|(r, &j)| t.at(r, j)).collect())
            },
        )
    }

    /// Flat elements at `idx`, as a rank-1 tensor.
    pub fn gather(self, idx: &[usize]) -> Result<Self> {
        let owned = idx.to_vec();
        self.unary(
            |a| Op::Gather { src: a, idx: owned },
            |t| {
                if idx.is_empty() || idx.iter().any(|&i| i >= t.len()) {
                    return Err(Error::shape("gather", t.shape(), &[idx.len()]));
                }
                Tensor::vector(idx.iter().map(|&i| t.data()[i]).collect())
            },
        )
    }

    /// Sums of consecutive runs of a rank-1 tensor; `lens` must cover it
    /// exactly and contain no zero.
    pub fn segment_sums(self, lens: &[usize]) -> Result<Self> {
        let owned = lens.to_vec();
        self.unary(
            |a| Op::SegmentSums { src: a, lens: owned },
            |t| {
                let total: usize = lens.iter().sum();
                if t.rank() != 1 || total != t.len() || lens.contains(&0) {
                    return Err(Error::shape("segment_sums", t.shape(), lens));
                }
                let mut out = Vec::with_capacity(lens.len());
                let mut at = 0;
                for &len in lens {
                    out.push(t.data()[at..at + len].iter().copied().sum());
                    at += len;
                }
                Tensor::vector(out)
            },
        )
    }

    /// Repeats a rank-1 tensor as `rows` identical rows.
    pub fn repeat_rows(self, rows: usize) -> Result<Self> {
        self.unary(Op::RepeatRows, |t| {
            if t.rank() != 1 || rows == 0 {
                return Err(Error::shape("repeat_rows", t.shape(), &[rows]));
            }
            let mut data = Vec::with_capacity(rows * t.len());
            for _ in 0..rows {
                data.extend_from_slice(t.data());
            }
            Tensor::matrix(rows, t.len(), data)
        })
    }

    pub fn sum(self) -> Result<Self> {
        self.unary(Op::Sum, |t| Ok(Tensor::scalar(t.sum())))
    }

    pub fn mean(self) -> Result<Self> {
        self.unary(Op::Mean, |t| {
            Ok(Tensor::scalar(t.sum() / F::from_usize(t.len()).expect("usize fits")))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(r: usize, c: usize, d: &[f64]) -> Tensor<f64> {
        Tensor::matrix(r, c, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_one_by_one() {
        let tape = Tape::new();
        let a = tape.constant(m(1, 2, &[1.0, 2.0]));
        let b = tape.constant(m(2, 1, &[3.0, 4.0]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(m(2, 3, &[0.0; 6]));
        let b = tape.constant(m(2, 3, &[0.0; 6]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn row_broadcast_mul() {
        let tape = Tape::new();
        let l = tape.constant(Tensor::vector(vec![2.0, 0.0]).unwrap());
        let x = tape.constant(m(2, 2, &[1.0, 3.0, 5.0, 7.0]));
        assert_eq!(x.mul(l).unwrap().value().data(), &[2.0, 0.0, 10.0, 0.0]);
    }

    #[test]
    fn ones_broadcast_is_identity() {
        let tape = Tape::new();
        let l = tape.constant(Tensor::ones(&[3]).unwrap());
        let x = tape.constant(m(2, 3, &[0.1, -2.0, 3.5, 4.0, 1e-9, -7.25]));
        assert_eq!(x.mul(l).unwrap().value(), x.value());
    }

    #[test]
    fn non_broadcastable_is_shape_error() {
        let tape = Tape::new();
        let l = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let x = tape.constant(m(2, 2, &[0.0; 4]));
        assert!(matches!(x.mul(l), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::<f64>::new();
        let s = tape
            .constant(Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap())
            .softmax()
            .unwrap()
            .value();
        for &p in s.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = tape
            .constant(Tensor::vector(vec![0.0, 2f64.ln()]).unwrap())
            .softmax()
            .unwrap()
            .value();
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        let big = tape
            .constant(Tensor::vector(vec![1000.0, 1000.5]).unwrap())
            .softmax()
            .unwrap()
            .value();
        let small = tape
            .constant(Tensor::vector(vec![0.0, 0.5]).unwrap())
            .softmax()
            .unwrap()
            .value();
        assert!(big.data().iter().all(|v| v.is_finite()));
        assert!(big.max_abs_diff(&small) < 1e-15);
    }

    #[test]
    fn softmax_nan_propagates() {
        let tape = Tape::new();
        let s = tape
            .constant(Tensor::vector(vec![f64::NAN, 0.0]).unwrap())
            .softmax()
            .unwrap()
            .value();
        assert!(s.data().iter().all(|v| v.is_nan()));
    }

    #[test]
    fn backward_sum_and_square() {
        let tape = Tape::new();
        let x = tape.param(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let loss = x.sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);

        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let loss = x.mul(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_twice_is_state_error() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0));
        let y = x.scale(2.0).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::State(_))));
    }

    #[test]
    fn backward_non_scalar_is_contract_error() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.param(Tensor::scalar(5.0));
        let loss = x.mul(c).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn log1m_clamps_saturated_probability() {
        let tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::vector(vec![0.0, 1.0]).unwrap());
        let v = p.log1m().unwrap().value();
        assert_eq!(v.data()[0], 0.0);
        assert!(v.data()[1].is_finite());
    }
}
