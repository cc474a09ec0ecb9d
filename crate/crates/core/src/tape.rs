//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Operations on [`Var`] handles are recorded on a [`Tape`] in the order they
//! are executed, which is a topological order of the computation graph.
//! [`Tape::backward`] walks the tape once in reverse and returns a
//! [`Gradients`] table. A tape supports a single backward pass; call
//! [`Tape::reset`] before reusing it.
//!
//! ```
//! use ckd_core::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = x.mul(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```

use std::cell::RefCell;
use std::fmt;

use crate::error::{shape_err, Error, Result};
use crate::scalar::{compensated_sum, log_sum_exp, Scalar};
use crate::tensor::Tensor;

enum Op<T> {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    Softmax { x: usize, tau: T },
    LogSoftmax { x: usize, tau: T },
    Normalize { x: usize, norms: Vec<T> },
    CrossEntropy { x: usize, targets: Vec<usize>, probs: Tensor<T> },
    NegSqDist(usize, usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Recording of a forward computation.
pub struct Tape<T> {
    inner: RefCell<Inner<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape")
            .field("nodes", &inner.nodes.len())
            .field("consumed", &inner.consumed)
            .finish()
    }
}

/// Handle to a tensor recorded on a tape.
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                consumed: false,
            }),
        }
    }

    /// Trainable input; receives a gradient on backward.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Constant, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        let inner = self.inner.get_mut();
        inner.nodes.clear();
        inner.consumed = false;
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|&i| inner.nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        let rg = self.requires(inputs);
        self.push(value, op, rg)
    }

    /// Back-propagates from a scalar `loss`. Consumes the tape.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::State("loss belongs to a different tape"));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::State("backward already ran on this tape"));
        }
        if !inner.nodes[loss.id].value.is_scalar() {
            return shape_err(
                "backward",
                format!(
                    "loss must be a scalar, got shape {:?}",
                    inner.nodes[loss.id].value.shape()
                ),
            );
        }
        inner.consumed = true;
        let nodes = &inner.nodes;

        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::scalar(T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, dx) in local_grads(nodes, node, &g)? {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&dx),
                    slot @ None => *slot = Some(dx),
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn local_grads<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
) -> Result<Vec<(usize, Tensor<T>)>> {
    let val = |i: usize| &nodes[i].value;
    let out = &node.value;
    Ok(match &node.op {
        Op::Leaf | Op::Constant => Vec::new(),
        Op::MatMul(a, b) => vec![
            (*a, g.matmul(&val(*b).transpose()?)?),
            (*b, val(*a).transpose()?.matmul(g)?),
        ],
        Op::Transpose(a) => vec![(*a, g.transpose()?)],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
        Op::Mul(a, b) => vec![
            (*a, g.zip_map(val(*b), "mul", |x, y| x * y)?),
            (*b, g.zip_map(val(*a), "mul", |x, y| x * y)?),
        ],
        Op::AddBias(x, b) => {
            let (_, c) = g.dims2("add_bias")?;
            let mut db = vec![T::zero(); c];
            for row in g.data().chunks(c) {
                for (acc, &v) in db.iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
            vec![(*x, g.clone()), (*b, Tensor::new(vec![c], db)?)]
        }
        Op::Scale(x, s) => {
            let s = *s;
            vec![(*x, g.map(|v| v * s))]
        }
        Op::AddScalar(x) => vec![(*x, g.clone())],
        Op::Relu(x) => vec![(
            *x,
            g.zip_map(val(*x), "relu", |gv, xv| if xv > T::zero() { gv } else { T::zero() })?,
        )],
        Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
        Op::Mean(x) => {
            let n = T::lit(val(*x).len() as f64);
            vec![(*x, Tensor::full(val(*x).shape(), g.item() / n))]
        }
        Op::SumRows(x) => {
            let (r, c) = val(*x).dims2("sum_rows")?;
            let mut dx = Vec::with_capacity(r * c);
            for &gi in g.data() {
                dx.extend(std::iter::repeat_n(gi, c));
            }
            vec![(*x, Tensor::new(vec![r, c], dx)?)]
        }
        Op::Softmax { x, tau } => {
            let (_, c) = out.dims2("softmax_rows")?;
            let mut dx = Vec::with_capacity(out.len());
            for (y, gr) in out.data().chunks(c).zip(g.data().chunks(c)) {
                let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                dx.extend(y.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot) / *tau));
            }
            vec![(*x, Tensor::new(out.shape().to_vec(), dx)?)]
        }
        Op::LogSoftmax { x, tau } => {
            let (_, c) = out.dims2("log_softmax_rows")?;
            let mut dx = Vec::with_capacity(out.len());
            for (y, gr) in out.data().chunks(c).zip(g.data().chunks(c)) {
                let gsum: T = gr.iter().copied().sum();
                dx.extend(y.iter().zip(gr).map(|(&yv, &gv)| (gv - yv.exp() * gsum) / *tau));
            }
            vec![(*x, Tensor::new(out.shape().to_vec(), dx)?)]
        }
        Op::Normalize { x, norms } => {
            let (_, c) = out.dims2("l2_normalize_rows")?;
            let mut dx = Vec::with_capacity(out.len());
            for ((y, gr), &n) in out.data().chunks(c).zip(g.data().chunks(c)).zip(norms) {
                let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                dx.extend(y.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * dot) / n));
            }
            vec![(*x, Tensor::new(out.shape().to_vec(), dx)?)]
        }
        Op::CrossEntropy { x, targets, probs } => {
            let (r, c) = probs.dims2("cross_entropy")?;
            let scale = g.item() / T::lit(r as f64);
            let mut dx = probs.clone();
            for (i, &t) in targets.iter().enumerate() {
                dx.data_mut()[i * c + t] = dx.data()[i * c + t] - T::one();
            }
            vec![(*x, dx.map(|v| v * scale))]
        }
        Op::NegSqDist(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (r, k) = ta.dims2("neg_sq_dist")?;
            let (q, _) = tb.dims2("neg_sq_dist")?;
            let two = T::lit(2.0);
            let mut da = Tensor::zeros(&[r, k]);
            let mut db = Tensor::zeros(&[q, k]);
            for i in 0..r {
                for j in 0..q {
                    let gij = g.get2(i, j);
                    if gij == T::zero() {
                        continue;
                    }
                    for l in 0..k {
                        let diff = ta.get2(i, l) - tb.get2(j, l);
                        da.data_mut()[i * k + l] = da.data()[i * k + l] - two * gij * diff;
                        db.data_mut()[j * k + l] = db.data()[j * k + l] + two * gij * diff;
                    }
                }
            }
            vec![(*a, da), (*b, db)]
        }
    })
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf. Leaves not reachable from the loss,
    /// and constants, get zeros.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        match self.grads.get(v.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.id]),
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor<T> {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    pub fn item(&self) -> T {
        self.with_value(Tensor::item)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::State("operands recorded on different tapes"))
        }
    }

    fn unary(&self, f: impl FnOnce(&Tensor<T>) -> Result<(Tensor<T>, Op<T>)>) -> Result<Self> {
        let (value, op) = self.with_value(f)?;
        Ok(self.tape.record(value, op, &[self.id]))
    }

    fn binary(
        &self,
        other: Var<'t, T>,
        f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
        op: Op<T>,
    ) -> Result<Self> {
        self.same_tape(&other)?;
        let value = {
            let inner = self.tape.inner.borrow();
            f(&inner.nodes[self.id].value, &inner.nodes[other.id].value)?
        };
        Ok(self.tape.record(value, op, &[self.id, other.id]))
    }

    /// Same value, cut off from gradient flow.
    pub fn detach(&self) -> Self {
        self.tape.constant(self.value())
    }

    pub fn matmul(&self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, |a, b| a.matmul(b), Op::MatMul(self.id, other.id))
    }

    pub fn transpose(&self) -> Result<Self> {
        let id = self.id;
        self.unary(|x| Ok((x.transpose()?, Op::Transpose(id))))
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Self> {
        self.binary(
            other,
            |a, b| a.zip_map(b, "add", |x, y| x + y),
            Op::Add(self.id, other.id),
        )
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Self> {
        self.binary(
            other,
            |a, b| a.zip_map(b, "sub", |x, y| x - y),
            Op::Sub(self.id, other.id),
        )
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t, T>) -> Result<Self> {
        self.binary(
            other,
            |a, b| a.zip_map(b, "mul", |x, y| x * y),
            Op::Mul(self.id, other.id),
        )
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&self, c: Tensor<T>) -> Result<Self> {
        let c = self.tape.constant(c);
        self.mul(c)
    }

    /// Adds a rank-1 bias to every row.
    pub fn add_bias(&self, bias: Var<'t, T>) -> Result<Self> {
        self.binary(
            bias,
            |a, b| a.add_row_broadcast(b),
            Op::AddBias(self.id, bias.id),
        )
    }

    pub fn scale(&self, s: T) -> Self {
        let value = self.with_value(|x| x.map(|v| v * s));
        self.tape.record(value, Op::Scale(self.id, s), &[self.id])
    }

    pub fn add_scalar(&self, s: T) -> Self {
        let value = self.with_value(|x| x.map(|v| v + s));
        self.tape.record(value, Op::AddScalar(self.id), &[self.id])
    }

    pub fn relu(&self) -> Self {
        let value = self.with_value(Tensor::relu);
        self.tape.record(value, Op::Relu(self.id), &[self.id])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self) -> Self {
        let value = self.with_value(|x| Tensor::scalar(x.sum()));
        self.tape.record(value, Op::Sum(self.id), &[self.id])
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&self) -> Self {
        let value = self.with_value(|x| Tensor::scalar(x.sum() / T::lit(x.len() as f64)));
        self.tape.record(value, Op::Mean(self.id), &[self.id])
    }

    /// Row sums of an `r × c` matrix, as `r × 1`.
    pub fn sum_rows(&self) -> Result<Self> {
        let id = self.id;
        self.unary(|x| {
            let (r, c) = x.dims2("sum_rows")?;
            let sums = x.data().chunks(c).map(|row| row.iter().copied().sum()).collect();
            Ok((Tensor::new(vec![r, 1], sums)?, Op::SumRows(id)))
        })
    }

    /// Row-wise `softmax(x / tau)`.
    pub fn softmax_rows(&self, tau: T) -> Result<Self> {
        let id = self.id;
        self.unary(|x| Ok((x.softmax_rows(tau)?, Op::Softmax { x: id, tau })))
    }

    /// Row-wise `log_softmax(x / tau)`.
    pub fn log_softmax_rows(&self, tau: T) -> Result<Self> {
        let id = self.id;
        self.unary(|x| Ok((x.log_softmax_rows(tau)?, Op::LogSoftmax { x: id, tau })))
    }

    /// Scales every row to unit Euclidean norm; near-zero rows are an error.
    pub fn l2_normalize_rows(&self) -> Result<Self> {
        let id = self.id;
        self.unary(|x| {
            let y = x.l2_normalize_rows()?;
            Ok((
                y,
                Op::Normalize {
                    x: id,
                    norms: x.row_norms()?,
                },
            ))
        })
    }

    /// Mean over rows of `-log softmax(x)[target]`.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Self> {
        self.masked_cross_entropy(targets, None)
    }

    /// Cross-entropy where columns with `mask[i * c + j] == false` are left
    /// out of row `i`'s normalizer (equivalent to setting them to `-inf`).
    pub fn masked_cross_entropy(&self, targets: &[usize], mask: Option<&[bool]>) -> Result<Self> {
        let id = self.id;
        self.unary(|x| {
            let (v, probs) = cross_entropy_forward(x, targets, mask)?;
            Ok((
                Tensor::scalar(v),
                Op::CrossEntropy {
                    x: id,
                    targets: targets.to_vec(),
                    probs,
                },
            ))
        })
    }

    /// Matrix of `-‖a_i - b_j‖²` over row pairs.
    pub fn neg_sq_dist(&self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, neg_sq_dist_values, Op::NegSqDist(self.id, other.id))
    }
}

fn cross_entropy_forward<T: Scalar>(
    x: &Tensor<T>,
    targets: &[usize],
    mask: Option<&[bool]>,
) -> Result<(T, Tensor<T>)> {
    let (r, c) = x.dims2("cross_entropy")?;
    if targets.len() != r {
        return shape_err(
            "cross_entropy",
            format!("{} targets for {} rows", targets.len(), r),
        );
    }
    if let Some(m) = mask {
        if m.len() != r * c {
            return shape_err("cross_entropy", "mask size differs from logits");
        }
    }
    let valid = |i: usize, j: usize| mask.is_none_or(|m| m[i * c + j]);
    let mut probs = Tensor::zeros(&[r, c]);
    let mut per_row = Vec::with_capacity(r);
    let mut buf = Vec::with_capacity(c);
    for (i, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::Index { index: t, len: c });
        }
        if !valid(i, t) {
            return Err(Error::Parameter(format!("target of row {} is masked out", i)));
        }
        let row = x.row(i);
        buf.clear();
        buf.extend((0..c).filter(|&j| valid(i, j)).map(|j| row[j]));
        let lse = log_sum_exp(&buf);
        per_row.push(lse - row[t]);
        for (j, &v) in row.iter().enumerate() {
            if valid(i, j) {
                probs.data_mut()[i * c + j] = (v - lse).exp();
            }
        }
    }
    Ok((compensated_sum(per_row) / T::lit(r as f64), probs))
}

fn neg_sq_dist_values<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, k) = a.dims2("neg_sq_dist")?;
    let (q, k2) = b.dims2("neg_sq_dist")?;
    if k != k2 {
        return shape_err("neg_sq_dist", format!("row widths {} and {}", k, k2));
    }
    let mut out = Vec::with_capacity(r * q);
    for i in 0..r {
        for j in 0..q {
            let d: T = a
                .row(i)
                .iter()
                .zip(b.row(j))
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum();
            out.push(-d);
        }
    }
    Tensor::new(vec![r, q], out)
}

/// Tape-free cross-entropy, for evaluation.
pub fn cross_entropy_value<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    cross_entropy_forward(logits, targets, None).map(|(v, _)| v)
}
