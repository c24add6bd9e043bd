//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! A [`Tape`] owns every intermediate tensor of one forward pass. Each
//! operation validates its operand shapes, computes its result eagerly, and
//! appends a node recording how it was produced; [`Value`] is a copyable
//! index into that arena. [`Tape::backward`] then walks the nodes in reverse
//! creation order, accumulating `∂loss/∂node` into each node's gradient slot.
//!
//! Design notes:
//! - The tape works on 2-D tensors only. Vectors travel as `[1, n]` or
//!   `[n, 1]`, scalars as `[1, 1]`. Higher-rank data (e.g. feature maps)
//!   lives outside the tape and is flattened before it gets here.
//! - Operands must come from the same tape; indices from another tape are a
//!   programming error and will index into the wrong arena.
//! - [`Tape::constant`] marks inputs that never need a gradient (data
//!   batches, masks, broadcast helpers). The backward sweep skips them, which
//!   cuts a large share of the work in attention layers.
//! - Gradients accumulate across repeated `backward` calls until
//!   [`Tape::reset_grads`] clears them. A reset plus an identical backward
//!   reproduces gradients bit for bit; nothing here is order-randomized.
//! - `exp` and `log` are the two primitives that can turn finite inputs into
//!   non-finite outputs, so exactly those check their results and fail loudly
//!   rather than let a NaN propagate.
//! - Softmax rows accumulate their normalizer in `f64` whatever the tensor
//!   scalar is. With `f32` activations this keeps every row sum within a few
//!   ulps of 1, which downstream attention checks rely on.

use crate::tensor::{Scalar, Tensor};
use std::cell::RefCell;
use thiserror::Error;

/// Handle to a node on a [`Tape`]. Cheap to copy, only meaningful on the
/// tape that created it.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Value(usize);

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a 2-D tensor, got shape {shape:?}")]
    NotAMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: tensors must hold at least one element")]
    EmptyTensor { op: &'static str },
    #[error("{op}: axis {axis} is not valid for 2-D tensors")]
    InvalidAxis { op: &'static str, axis: usize },
    #[error("{op}: range {start}..{end} exceeds axis length {len}")]
    RangeOutOfBounds {
        op: &'static str,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("{op}: group sizes {counts:?} do not cover {rows} rows")]
    BadSegments {
        op: &'static str,
        counts: Vec<usize>,
        rows: usize,
    },
    #[error("{op}: group sizes must all be at least 1")]
    ZeroSizeGroup { op: &'static str },
    #[error("{op}: mask length {mask_len} does not match {numel} elements")]
    MaskLength {
        op: &'static str,
        mask_len: usize,
        numel: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward: loss must hold exactly one element, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
}

pub type TapeResult<V> = Result<V, TapeError>;

enum Op<T> {
    Leaf,
    Constant,
    Matmul(Value, Value),
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Scale(Value, T),
    Concat { axis: usize, parts: Vec<Value> },
    RowSoftmax(Value),
    MaskedRowSoftmax(Value),
    Relu(Value),
    LeakyRelu(Value, T),
    Exp(Value),
    Log(Value),
    SumAll(Value),
    MeanAll(Value),
    SegmentSum(Value, Vec<usize>),
    SegmentMean(Value, Vec<usize>),
    SegmentBroadcast(Value, Vec<usize>),
    AddRow(Value, Value),
    Narrow { input: Value, axis: usize, start: usize, len: usize },
    Transpose(Value),
    Clamp(Value, T, T),
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// Append-only arena holding one forward pass and its gradients.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accum<T: Scalar>(slot: &mut Option<Tensor<T>>, delta: Tensor<T>) {
    match slot {
        Some(g) => g.add_assign(&delta),
        None => *slot = Some(delta),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, node: Node<T>) -> Value {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Value(nodes.len() - 1)
    }

    fn check_input(op: &'static str, t: &Tensor<T>) -> TapeResult<()> {
        if !t.is_matrix() {
            return Err(TapeError::NotAMatrix {
                op,
                shape: t.shape().to_vec(),
            });
        }
        if t.numel() == 0 {
            return Err(TapeError::EmptyTensor { op });
        }
        Ok(())
    }

    /// Registers a tensor that participates in gradients (a parameter).
    pub fn leaf(&self, t: Tensor<T>) -> TapeResult<Value> {
        Self::check_input("leaf", &t)?;
        Ok(self.push(Node {
            value: t,
            grad: None,
            needs_grad: true,
            op: Op::Leaf,
        }))
    }

    /// Registers a tensor that never needs a gradient (data, masks, helpers).
    pub fn constant(&self, t: Tensor<T>) -> TapeResult<Value> {
        Self::check_input("constant", &t)?;
        Ok(self.push(Node {
            value: t,
            grad: None,
            needs_grad: false,
            op: Op::Constant,
        }))
    }

    /// Clone of the tensor held by `v`.
    pub fn value(&self, v: Value) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Runs `f` against the tensor held by `v` without cloning it.
    pub fn with_value<R>(&self, v: Value, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Value) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn dims(&self, v: Value) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        let s = nodes[v.0].value.shape();
        (s[0], s[1])
    }

    /// Gradient accumulated for `v`; zeros if backward never reached it.
    pub fn grad(&self, v: Value) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        match &nodes[v.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(nodes[v.0].value.shape()),
        }
    }

    /// Clears every gradient slot. Values are untouched.
    pub fn reset_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    // ---- binary elementwise ----

    fn binary_shapes(&self, op: &'static str, a: Value, b: Value) -> TapeResult<bool> {
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[a.0], &nodes[b.0]);
        if na.value.shape() != nb.value.shape() {
            return Err(TapeError::ShapeMismatch {
                op,
                lhs: na.value.shape().to_vec(),
                rhs: nb.value.shape().to_vec(),
            });
        }
        Ok(na.needs_grad || nb.needs_grad)
    }

    pub fn add(&self, a: Value, b: Value) -> TapeResult<Value> {
        let needs = self.binary_shapes("add", a, b)?;
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.add(&nodes[b.0].value)
        };
        Ok(self.push(Node {
            value,
            grad: None,
            needs_grad: needs,
            op: Op::Add(a, b),
        }))
    }

    pub fn sub(&self, a: Value, b: Value) -> TapeResult<Value> {
        let needs = self.binary_shapes("sub", a, b)?;
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.sub(&nodes[b.0].value)
        };
        Ok(self.push(Node {
            value,
            grad: None,
            needs_grad: needs,
            op: Op::Sub(a, b),
        }))
    }

    pub fn mul(&self, a: Value, b: Value) -> TapeResult<Value> {
        let needs = self.binary_shapes("mul", a, b)?;
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.mul_elem(&nodes[b.0].value)
        };
        Ok(self.push(Node {
            value,
            grad: None,
            needs_grad: needs,
            op: Op::Mul(a, b),
        }))
    }

    pub fn matmul(&self, a: Value, b: Value) -> TapeResult<Value> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let (sa, sb) = (na.value.shape(), nb.value.shape());
            if sa[1] != sb[0] {
                return Err(TapeError::ShapeMismatch {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            (na.value.matmul(&nb.value), na.needs_grad || nb.needs_grad)
        };
        Ok(self.push(Node {
            value,
            grad: None,
            needs_grad: needs,
            op: Op::Matmul(a, b),
        }))
    }

    pub fn scale(&self, a: Value, k: T) -> TapeResult<Value> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.scale(k), nodes[a.0].needs_grad)
        };
        Ok(self.push(Node {
            value,
            grad: None,
            needs_grad: needs,
            op: Op::Scale(a, k),
        }))
    }

    /// Adds a `[1, d]` row vector to every row of a `[n, d]` tensor.
    pub fn add_row(&self, a: Value, row: Value) -> TapeResult<Value> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let (na, nr) = (&nodes[a.0], &nodes[row.0]);
            let (sa, sr) = (na.value.shape(), nr.value.shape());
            if sr[0] != 1 || sa[1] != sr[1] {
                return Err(TapeError::ShapeMismatch {
                    op: "add_row",
                    lhs: sa.to_vec(),
                    rhs: sr.to_vec(),
                });
            }
            let (n, d) = (sa[0], sa[1]);
            let mut out = Vec::with_capacity(n * d);
            let r = nr.value.data();
            for i in 0..n {
                for (j, &rv) in r.iter().enumerate() {
                    out.push(na.value.data()[i * d + j] + rv);
                }
            }
            (
                Tensor::from_vec(&[n, d], out),
                na.needs_grad || nr.needs_grad,
            )
        };
        Ok(self.push(Node {
            value,
            grad: None,
            needs_grad: needs,
            op: Op::AddRow(a, row),
        }))
    }

    // ---- unary ----

    fn unary(
        &self,
        a: Value,
        f: impl Fn(&Tensor<T>) -> Tensor<T>,
        op: Op<T>,
    ) -> Value {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            (f(&nodes[a.0].value), nodes[a.0].needs_grad)
        };
        self.push(Node {
            value,
            grad: None,
            needs_grad: needs,
            op,
        })
    }

    pub fn relu(&self, a: Value) -> TapeResult<Value> {
        Ok(self.unary(a, |t| t.map(|v| if v > T::zero() { v } else { T::zero() }), Op::Relu(a)))
    }

    /// Leaky rectifier: `x` for positive inputs, `slope * x` otherwise.
    pub fn leaky_relu(&self, a: Value, slope: T) -> TapeResult<Value> {
        Ok(self.unary(
            a,
            |t| t.map(|v| if v > T::zero() { v } else { slope * v }),
            Op::LeakyRelu(a, slope),
        ))
    }

    pub fn exp(&self, a: Value) -> TapeResult<Value> {
        let out = self.unary(a, |t| t.map(|v| v.exp()), Op::Exp(a));
        if !self.with_value(out, Tensor::all_finite) {
            return Err(TapeError::NonFinite { op: "exp" });
        }
        Ok(out)
    }

    pub fn log(&self, a: Value) -> TapeResult<Value> {
        let out = self.unary(a, |t| t.map(|v| v.ln()), Op::Log(a));
        if !self.with_value(out, Tensor::all_finite) {
            return Err(TapeError::NonFinite { op: "log" });
        }
        Ok(out)
    }

    pub fn clamp(&self, a: Value, lo: T, hi: T) -> TapeResult<Value> {
        if !(lo <= hi) {
            return Err(TapeError::Invalid {
                op: "clamp",
                reason: format!("bounds out of order: {lo} > {hi}"),
            });
        }
        Ok(self.unary(
            a,
            |t| t.map(|v| if v < lo { lo } else if v > hi { hi } else { v }),
            Op::Clamp(a, lo, hi),
        ))
    }

    pub fn transpose(&self, a: Value) -> TapeResult<Value> {
        Ok(self.unary(a, Tensor::transpose2, Op::Transpose(a)))
    }

    /// Contiguous slice of rows (`axis` 0) or columns (`axis` 1).
    pub fn narrow(&self, a: Value, axis: usize, start: usize, len: usize) -> TapeResult<Value> {
        if axis > 1 {
            return Err(TapeError::InvalidAxis { op: "narrow", axis });
        }
        let (n, d) = self.dims(a);
        let dim = if axis == 0 { n } else { d };
        if len == 0 || start + len > dim {
            return Err(TapeError::RangeOutOfBounds {
                op: "narrow",
                start,
                end: start + len,
                len: dim,
            });
        }
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let out = if axis == 0 {
                Tensor::from_vec(&[len, d], t.data()[start * d..(start + len) * d].to_vec())
            } else {
                let mut out = Vec::with_capacity(n * len);
                for i in 0..n {
                    out.extend_from_slice(&t.data()[i * d + start..i * d + start + len]);
                }
                Tensor::from_vec(&[n, len], out)
            };
            (out, nodes[a.0].needs_grad)
        };
        Ok(self.push(Node {
            value,
            grad: None,
            needs_grad: needs,
            op: Op::Narrow { input: a, axis, start, len },
        }))
    }

    /// Concatenates along rows (`axis` 0) or columns (`axis` 1).
    pub fn concat(&self, axis: usize, parts: &[Value]) -> TapeResult<Value> {
        if axis > 1 {
            return Err(TapeError::InvalidAxis { op: "concat", axis });
        }
        if parts.is_empty() {
            return Err(TapeError::Invalid {
                op: "concat",
                reason: "needs at least one part".into(),
            });
        }
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts[0].0].value.shape().to_vec();
            let other_axis = 1 - axis;
            let mut along = first[axis];
            let mut needs = nodes[parts[0].0].needs_grad;
            for p in &parts[1..] {
                let s = nodes[p.0].value.shape();
                if s[other_axis] != first[other_axis] {
                    return Err(TapeError::ShapeMismatch {
                        op: "concat",
                        lhs: first.clone(),
                        rhs: s.to_vec(),
                    });
                }
                along += s[axis];
                needs |= nodes[p.0].needs_grad;
            }
            let value = if axis == 0 {
                let d = first[1];
                let mut out = Vec::with_capacity(along * d);
                for p in parts {
                    out.extend_from_slice(nodes[p.0].value.data());
                }
                Tensor::from_vec(&[along, d], out)
            } else {
                let n = first[0];
                let mut out = Vec::with_capacity(n * along);
                for i in 0..n {
                    for p in parts {
                        let t = &nodes[p.0].value;
                        let w = t.shape()[1];
                        out.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
                    }
                }
                Tensor::from_vec(&[n, along], out)
            };
            (value, needs)
        };
        Ok(self.push(Node {
            value,
            grad: None,
            needs_grad: needs,
            op: Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
        }))
    }

    // ---- softmax ----

    /// Row-wise softmax over all columns.
    pub fn row_softmax(&self, a: Value) -> TapeResult<Value> {
        let (n, d) = self.dims(a);
        let mask = vec![true; n * d];
        self.softmax_impl(a, &mask, Op::RowSoftmax(a))
    }

    /// Row-wise softmax restricted to `mask`-true entries; masked-out entries
    /// come back as exact zeros. A row with no admitted entry is all zeros
    /// rather than an error — callers that cannot tolerate that must check.
    pub fn masked_row_softmax(&self, a: Value, mask: &[bool]) -> TapeResult<Value> {
        let (n, d) = self.dims(a);
        if mask.len() != n * d {
            return Err(TapeError::MaskLength {
                op: "masked_row_softmax",
                mask_len: mask.len(),
                numel: n * d,
            });
        }
        self.softmax_impl(a, mask, Op::MaskedRowSoftmax(a))
    }

    fn softmax_impl(&self, a: Value, mask: &[bool], op: Op<T>) -> TapeResult<Value> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let (n, d) = (t.shape()[0], t.shape()[1]);
            let mut out = vec![T::zero(); n * d];
            for i in 0..n {
                let row = &t.data()[i * d..(i + 1) * d];
                let mrow = &mask[i * d..(i + 1) * d];
                let mut max = T::neg_infinity();
                for (j, &v) in row.iter().enumerate() {
                    if mrow[j] && v > max {
                        max = v;
                    }
                }
                if max == T::neg_infinity() {
                    continue; // fully masked row stays zero
                }
                // Normalizer in f64 regardless of T: convex weights that sum
                // to 1 well inside f32 row-sum tolerances.
                let mut sum = 0.0f64;
                let orow = &mut out[i * d..(i + 1) * d];
                for (j, &v) in row.iter().enumerate() {
                    if mrow[j] {
                        let e = (v - max).exp();
                        orow[j] = e;
                        sum += e.to_f64();
                    }
                }
                let inv = 1.0 / sum;
                for (j, o) in orow.iter_mut().enumerate() {
                    if mrow[j] {
                        *o = T::from_f64(o.to_f64() * inv);
                    }
                }
            }
            (Tensor::from_vec(&[n, d], out), nodes[a.0].needs_grad)
        };
        Ok(self.push(Node {
            value,
            grad: None,
            needs_grad: needs,
            op,
        }))
    }

    // ---- reductions ----

    /// Sum of every element, as a `[1, 1]` tensor.
    pub fn sum_all(&self, a: Value) -> TapeResult<Value> {
        Ok(self.unary(
            a,
            |t| {
                let mut acc = T::zero();
                for &v in t.data() {
                    acc += v;
                }
                Tensor::scalar(acc)
            },
            Op::SumAll(a),
        ))
    }

    /// Mean of every element, as a `[1, 1]` tensor.
    pub fn mean_all(&self, a: Value) -> TapeResult<Value> {
        Ok(self.unary(
            a,
            |t| {
                let mut acc = T::zero();
                for &v in t.data() {
                    acc += v;
                }
                Tensor::scalar(acc / T::from_f64(t.numel() as f64))
            },
            Op::MeanAll(a),
        ))
    }

    fn check_segments(
        &self,
        op: &'static str,
        a: Value,
        counts: &[usize],
    ) -> TapeResult<(usize, usize)> {
        let (n, d) = self.dims(a);
        if counts.iter().any(|&c| c == 0) {
            return Err(TapeError::ZeroSizeGroup { op });
        }
        if counts.iter().sum::<usize>() != n {
            return Err(TapeError::BadSegments {
                op,
                counts: counts.to_vec(),
                rows: n,
            });
        }
        Ok((n, d))
    }

    /// Per-group row sums. Rows are grouped contiguously: the first
    /// `counts[0]` rows form group 0, the next `counts[1]` group 1, and so
    /// on. Output has one row per group.
    pub fn segment_sum(&self, a: Value, counts: &[usize]) -> TapeResult<Value> {
        let (_, d) = self.check_segments("segment_sum", a, counts)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let mut out = vec![T::zero(); counts.len() * d];
            let mut r = 0;
            for (g, &c) in counts.iter().enumerate() {
                let orow = &mut out[g * d..(g + 1) * d];
                for _ in 0..c {
                    for (o, &v) in orow.iter_mut().zip(&t.data()[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                    r += 1;
                }
            }
            Tensor::from_vec(&[counts.len(), d], out)
        };
        let needs = self.nodes.borrow()[a.0].needs_grad;
        Ok(self.push(Node {
            value,
            grad: None,
            needs_grad: needs,
            op: Op::SegmentSum(a, counts.to_vec()),
        }))
    }

    /// Per-group row means; see [`Tape::segment_sum`] for the grouping rule.
    pub fn segment_mean(&self, a: Value, counts: &[usize]) -> TapeResult<Value> {
        let sum = self.segment_sum(a, counts)?;
        // Rewrite in place instead of composing sum+scale so the whole mean
        // is a single differentiable node.
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[sum.0].value;
            let d = t.shape()[1];
            let mut data = t.data().to_vec();
            for (g, &c) in counts.iter().enumerate() {
                let inv = T::one() / T::from_f64(c as f64);
                for v in &mut data[g * d..(g + 1) * d] {
                    *v *= inv;
                }
            }
            (
                Tensor::from_vec(&[counts.len(), d], data),
                nodes[a.0].needs_grad,
            )
        };
        Ok(self.push(Node {
            value,
            grad: None,
            needs_grad: needs,
            op: Op::SegmentMean(a, counts.to_vec()),
        }))
    }

    /// Repeats group row `g` for each of the `counts[g]` rows of that group,
    /// inverting the shape effect of [`Tape::segment_sum`].
    pub fn segment_broadcast(&self, a: Value, counts: &[usize]) -> TapeResult<Value> {
        let (groups, d) = self.dims(a);
        if counts.iter().any(|&c| c == 0) {
            return Err(TapeError::ZeroSizeGroup {
                op: "segment_broadcast",
            });
        }
        if counts.len() != groups {
            return Err(TapeError::BadSegments {
                op: "segment_broadcast",
                counts: counts.to_vec(),
                rows: groups,
            });
        }
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let total: usize = counts.iter().sum();
            let mut out = Vec::with_capacity(total * d);
            for (g, &c) in counts.iter().enumerate() {
                for _ in 0..c {
                    out.extend_from_slice(&t.data()[g * d..(g + 1) * d]);
                }
            }
            Tensor::from_vec(&[total, d], out)
        };
        let needs = self.nodes.borrow()[a.0].needs_grad;
        Ok(self.push(Node {
            value,
            grad: None,
            needs_grad: needs,
            op: Op::SegmentBroadcast(a, counts.to_vec()),
        }))
    }

    // ---- backward ----

    /// Reverse sweep from `loss`, which must hold exactly one element.
    /// Leaf gradients add onto whatever is already stored — two sweeps double
    /// them — while interior gradients are recomputed from scratch each call.
    /// Call [`Tape::reset_grads`] between independent passes.
    pub fn backward(&self, loss: Value) -> TapeResult<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.0].value.numel() != 1 {
            return Err(TapeError::NonScalarLoss {
                shape: nodes[loss.0].value.shape().to_vec(),
            });
        }
        // Interior gradients are scratch space for this sweep; only leaves
        // accumulate across calls. Stale interior values from an earlier
        // backward pass must not leak into this one.
        for node in nodes[..=loss.0].iter_mut() {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        {
            let ln = &mut nodes[loss.0];
            let seed = Tensor::filled(ln.value.shape(), T::one());
            accum(&mut ln.grad, seed);
        }
        for i in (0..=loss.0).rev() {
            let (before, rest) = nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_ref() else { continue };
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::Matmul(a, b) => {
                    if before[a.0].needs_grad {
                        let d = g.matmul_a_bt(&before[b.0].value);
                        accum(&mut before[a.0].grad, d);
                    }
                    if before[b.0].needs_grad {
                        let d = before[a.0].value.matmul_at_b(g);
                        accum(&mut before[b.0].grad, d);
                    }
                }
                Op::Add(a, b) => {
                    if before[a.0].needs_grad {
                        accum(&mut before[a.0].grad, g.clone());
                    }
                    if before[b.0].needs_grad {
                        accum(&mut before[b.0].grad, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if before[a.0].needs_grad {
                        accum(&mut before[a.0].grad, g.clone());
                    }
                    if before[b.0].needs_grad {
                        accum(&mut before[b.0].grad, g.scale(-T::one()));
                    }
                }
                Op::Mul(a, b) => {
                    if before[a.0].needs_grad {
                        let d = g.mul_elem(&before[b.0].value);
                        accum(&mut before[a.0].grad, d);
                    }
                    if before[b.0].needs_grad {
                        let d = g.mul_elem(&before[a.0].value);
                        accum(&mut before[b.0].grad, d);
                    }
                }
                Op::Scale(a, k) => {
                    if before[a.0].needs_grad {
                        accum(&mut before[a.0].grad, g.scale(*k));
                    }
                }
                Op::Concat { axis, parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let pn = &before[p.0];
                        let along = pn.value.shape()[*axis];
                        if pn.needs_grad {
                            let piece = slice_along(g, *axis, offset, along);
                            accum(&mut before[p.0].grad, piece);
                        }
                        offset += along;
                    }
                }
                Op::RowSoftmax(a) | Op::MaskedRowSoftmax(a) => {
                    if before[a.0].needs_grad {
                        // dX_row = y ⊙ (g − <g, y>); masked entries have
                        // y = 0 and drop out on their own.
                        let y = &node.value;
                        let (n, d) = (y.shape()[0], y.shape()[1]);
                        let mut out = Vec::with_capacity(n * d);
                        for r in 0..n {
                            let yr = &y.data()[r * d..(r + 1) * d];
                            let gr = &g.data()[r * d..(r + 1) * d];
                            let mut dot = T::zero();
                            for (&yv, &gv) in yr.iter().zip(gr) {
                                dot += yv * gv;
                            }
                            for (&yv, &gv) in yr.iter().zip(gr) {
                                out.push(yv * (gv - dot));
                            }
                        }
                        accum(&mut before[a.0].grad, Tensor::from_vec(&[n, d], out));
                    }
                }
                Op::Relu(a) => {
                    if before[a.0].needs_grad {
                        let x = &before[a.0].value;
                        let d = masked_grad(g, x, |v| v > T::zero(), T::one(), T::zero());
                        accum(&mut before[a.0].grad, d);
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    if before[a.0].needs_grad {
                        let x = &before[a.0].value;
                        let d = masked_grad(g, x, |v| v > T::zero(), T::one(), *slope);
                        accum(&mut before[a.0].grad, d);
                    }
                }
                Op::Exp(a) => {
                    if before[a.0].needs_grad {
                        accum(&mut before[a.0].grad, g.mul_elem(&node.value));
                    }
                }
                Op::Log(a) => {
                    if before[a.0].needs_grad {
                        let x = &before[a.0].value;
                        let data = g
                            .data()
                            .iter()
                            .zip(x.data())
                            .map(|(&gv, &xv)| gv / xv)
                            .collect();
                        accum(
                            &mut before[a.0].grad,
                            Tensor::from_vec(x.shape(), data),
                        );
                    }
                }
                Op::SumAll(a) => {
                    if before[a.0].needs_grad {
                        let gv = g.data()[0];
                        let shape = before[a.0].value.shape().to_vec();
                        accum(&mut before[a.0].grad, Tensor::filled(&shape, gv));
                    }
                }
                Op::MeanAll(a) => {
                    if before[a.0].needs_grad {
                        let x = &before[a.0].value;
                        let gv = g.data()[0] / T::from_f64(x.numel() as f64);
                        let shape = x.shape().to_vec();
                        accum(&mut before[a.0].grad, Tensor::filled(&shape, gv));
                    }
                }
                Op::SegmentSum(a, counts) => {
                    if before[a.0].needs_grad {
                        let x = &before[a.0].value;
                        let d = x.shape()[1];
                        let mut out = Vec::with_capacity(x.numel());
                        for (gi, &c) in counts.iter().enumerate() {
                            for _ in 0..c {
                                out.extend_from_slice(&g.data()[gi * d..(gi + 1) * d]);
                            }
                        }
                        accum(&mut before[a.0].grad, Tensor::from_vec(x.shape(), out));
                    }
                }
                Op::SegmentMean(a, counts) => {
                    if before[a.0].needs_grad {
                        let x = &before[a.0].value;
                        let d = x.shape()[1];
                        let mut out = Vec::with_capacity(x.numel());
                        for (gi, &c) in counts.iter().enumerate() {
                            let inv = T::one() / T::from_f64(c as f64);
                            for _ in 0..c {
                                out.extend(
                                    g.data()[gi * d..(gi + 1) * d].iter().map(|&v| v * inv),
                                );
                            }
                        }
                        accum(&mut before[a.0].grad, Tensor::from_vec(x.shape(), out));
                    }
                }
                Op::SegmentBroadcast(a, counts) => {
                    if before[a.0].needs_grad {
                        let d = node.value.shape()[1];
                        let mut out = vec![T::zero(); counts.len() * d];
                        let mut r = 0;
                        for (gi, &c) in counts.iter().enumerate() {
                            let orow = &mut out[gi * d..(gi + 1) * d];
                            for _ in 0..c {
                                for (o, &v) in orow.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                                    *o += v;
                                }
                                r += 1;
                            }
                        }
                        accum(
                            &mut before[a.0].grad,
                            Tensor::from_vec(&[counts.len(), d], out),
                        );
                    }
                }
                Op::AddRow(a, row) => {
                    if before[a.0].needs_grad {
                        accum(&mut before[a.0].grad, g.clone());
                    }
                    if before[row.0].needs_grad {
                        let (n, d) = (g.shape()[0], g.shape()[1]);
                        let mut out = vec![T::zero(); d];
                        for i in 0..n {
                            for (o, &v) in out.iter_mut().zip(&g.data()[i * d..(i + 1) * d]) {
                                *o += v;
                            }
                        }
                        accum(&mut before[row.0].grad, Tensor::from_vec(&[1, d], out));
                    }
                }
                Op::Narrow { input, axis, start, len } => {
                    if before[input.0].needs_grad {
                        let shape = before[input.0].value.shape().to_vec();
                        let slot = &mut before[input.0].grad;
                        if slot.is_none() {
                            *slot = Some(Tensor::zeros(&shape));
                        }
                        let dst = slot.as_mut().unwrap();
                        let d = shape[1];
                        if *axis == 0 {
                            let base = start * d;
                            for (o, &v) in dst.data_mut()[base..base + len * d]
                                .iter_mut()
                                .zip(g.data())
                            {
                                *o += v;
                            }
                        } else {
                            for i in 0..shape[0] {
                                let dst_row = &mut dst.data_mut()[i * d + start..i * d + start + len];
                                for (o, &v) in
                                    dst_row.iter_mut().zip(&g.data()[i * len..(i + 1) * len])
                                {
                                    *o += v;
                                }
                            }
                        }
                    }
                }
                Op::Transpose(a) => {
                    if before[a.0].needs_grad {
                        accum(&mut before[a.0].grad, g.transpose2());
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    if before[a.0].needs_grad {
                        let x = &before[a.0].value;
                        let data = g
                            .data()
                            .iter()
                            .zip(x.data())
                            .map(|(&gv, &xv)| {
                                if xv >= *lo && xv <= *hi {
                                    gv
                                } else {
                                    T::zero()
                                }
                            })
                            .collect();
                        accum(&mut before[a.0].grad, Tensor::from_vec(x.shape(), data));
                    }
                }
            }
        }
        Ok(())
    }
}

fn masked_grad<T: Scalar>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    pred: impl Fn(T) -> bool,
    on_true: T,
    on_false: T,
) -> Tensor<T> {
    let data = g
        .data()
        .iter()
        .zip(x.data())
        .map(|(&gv, &xv)| if pred(xv) { gv * on_true } else { gv * on_false })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

fn slice_along<T: Scalar>(t: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let (n, d) = (t.shape()[0], t.shape()[1]);
    if axis == 0 {
        Tensor::from_vec(&[len, d], t.data()[start * d..(start + len) * d].to_vec())
    } else {
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&t.data()[i * d + start..i * d + start + len]);
        }
        Tensor::from_vec(&[n, len], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec())
    }

    #[test]
    fn softmax_of_equal_scores_is_uniform() {
        let tape = Tape::new();
        let x = tape.leaf(t2(&[1, 3], &[0.0, 0.0, 0.0])).unwrap();
        let y = tape.row_softmax(x).unwrap();
        let v = tape.value(y);
        for &p in v.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15, "got {p}");
        }
    }

    #[test]
    fn leaky_relu_keeps_positive_and_scales_negative() {
        let tape = Tape::new();
        let x = tape.leaf(t2(&[1, 2], &[-1.0, 2.0])).unwrap();
        let y = tape.leaky_relu(x, 0.2).unwrap();
        assert_eq!(tape.value(y).data(), &[-0.2, 2.0]);
    }

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let tape = Tape::new();
        let x = tape.leaf(t2(&[2, 2], &[1.0, -2.0, 3.0, 0.5])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[2.0, -4.0, 6.0, 1.0]);
    }

    #[test]
    fn matmul_gradients_match_hand_derivation() {
        // loss = sum(A @ B) ⇒ dA = ones @ Bᵀ, dB = Aᵀ @ ones.
        let tape = Tape::new();
        let a = tape.leaf(t2(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let b = tape.leaf(t2(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c).unwrap();
        tape.backward(loss).unwrap();
        // dA[i][k] = Σ_j B[k][j]
        assert_eq!(tape.grad(a).data(), &[15.0, 19.0, 23.0, 15.0, 19.0, 23.0]);
        // dB[k][j] = Σ_i A[i][k]
        assert_eq!(tape.grad(b).data(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn masked_rows_are_exactly_zero_and_rest_sums_to_one() {
        let tape = Tape::new();
        let x = tape
            .leaf(t2(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 1.0]))
            .unwrap();
        let mask = [true, false, true, false, false, false];
        let y = tape.masked_row_softmax(x, &mask).unwrap();
        let v = tape.value(y);
        assert_eq!(v.at(0, 1), 0.0);
        assert!((v.at(0, 0) + v.at(0, 2) - 1.0).abs() < 1e-15);
        assert_eq!(v.row(1), &[0.0, 0.0, 0.0], "fully masked row");
    }

    #[test]
    fn narrow_concat_round_trip() {
        let tape = Tape::new();
        let x = tape.leaf(t2(&[2, 4], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0])).unwrap();
        let left = tape.narrow(x, 1, 0, 2).unwrap();
        let right = tape.narrow(x, 1, 2, 2).unwrap();
        let back = tape.concat(1, &[left, right]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
        let top = tape.narrow(x, 0, 0, 1).unwrap();
        let bottom = tape.narrow(x, 0, 1, 1).unwrap();
        let back = tape.concat(0, &[top, bottom]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn segment_ops_on_known_groups() {
        let tape = Tape::new();
        // groups: rows {0,1}, {2}
        let x = tape.leaf(t2(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let s = tape.segment_sum(x, &[2, 1]).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0, 5.0, 6.0]);
        let m = tape.segment_mean(x, &[2, 1]).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0, 3.0, 5.0, 6.0]);
        let b = tape.segment_broadcast(m, &[2, 1]).unwrap();
        assert_eq!(tape.value(b).data(), &[2.0, 3.0, 2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn add_row_broadcasts_and_backward_sums_rows() {
        let tape = Tape::new();
        let x = tape.leaf(t2(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let r = tape.leaf(t2(&[1, 2], &[10.0, 20.0])).unwrap();
        let y = tape.add_row(x, r).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(r).data(), &[2.0, 2.0]);
        assert_eq!(tape.grad(x).data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn repeated_backward_accumulates_and_reset_restores() {
        let tape = Tape::new();
        let x = tape.leaf(t2(&[1, 2], &[3.0, -1.0])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        let once = tape.grad(x);
        tape.backward(loss).unwrap();
        let twice = tape.grad(x);
        assert_eq!(twice.data(), once.scale(2.0).data());
        tape.reset_grads();
        tape.backward(loss).unwrap();
        let again = tape.grad(x);
        // Bit-for-bit identical after a reset.
        for (a, b) in again.data().iter().zip(once.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn grad_defaults_to_zeros_before_backward() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t2(&[2, 1], &[1.0, 2.0])).unwrap();
        assert_eq!(tape.grad(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t2(&[1, 2], &[1.0, 2.0])).unwrap();
        let c = tape.constant(t2(&[1, 2], &[5.0, 5.0])).unwrap();
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[5.0, 5.0]);
        assert_eq!(tape.grad(c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_errors_name_the_op_and_shapes() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.leaf(Tensor::zeros(&[2, 2])).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
        let err = tape.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2])).unwrap();
        match tape.backward(x) {
            Err(TapeError::NonScalarLoss { shape }) => assert_eq!(shape, vec![2, 2]),
            other => panic!("expected NonScalarLoss, got {other:?}"),
        }
    }

    #[test]
    fn empty_and_higher_rank_inputs_are_rejected() {
        let tape: Tape<f64> = Tape::new();
        assert!(matches!(
            tape.leaf(Tensor::zeros(&[0, 3])),
            Err(TapeError::EmptyTensor { .. })
        ));
        assert!(matches!(
            tape.constant(Tensor::zeros(&[2, 2, 2])),
            Err(TapeError::NotAMatrix { .. })
        ));
    }

    #[test]
    fn zero_size_group_is_rejected() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3, 2])).unwrap();
        assert!(matches!(
            tape.segment_sum(x, &[2, 0, 1]),
            Err(TapeError::ZeroSizeGroup { .. })
        ));
        assert!(matches!(
            tape.segment_sum(x, &[2, 2]),
            Err(TapeError::BadSegments { .. })
        ));
    }

    #[test]
    fn narrow_range_errors() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3, 2])).unwrap();
        assert!(matches!(
            tape.narrow(x, 0, 2, 2),
            Err(TapeError::RangeOutOfBounds { .. })
        ));
        assert!(matches!(
            tape.narrow(x, 2, 0, 1),
            Err(TapeError::InvalidAxis { .. })
        ));
    }

    #[test]
    fn log_of_nonpositive_fails_loudly() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t2(&[1, 2], &[1.0, 0.0])).unwrap();
        assert!(matches!(tape.log(x), Err(TapeError::NonFinite { op: "log" })));
    }

    #[test]
    fn exp_overflow_fails_loudly() {
        let tape: Tape<f32> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1], vec![200.0f32])).unwrap();
        assert!(matches!(tape.exp(x), Err(TapeError::NonFinite { op: "exp" })));
    }

    #[test]
    fn f32_softmax_row_sums_stay_within_tight_tolerance() {
        // Wide rows with spread-out scores are the worst case for the
        // row-sum guarantee the attention layers depend on.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let tape: Tape<f32> = Tape::new();
        for _ in 0..200 {
            let d = rng.random_range(2..=48);
            let data: Vec<f32> = (0..d).map(|_| rng.random_range(-8.0..8.0)).collect();
            let x = tape.constant(Tensor::from_vec(&[1, d], data)).unwrap();
            let y = tape.row_softmax(x).unwrap();
            let sum: f64 = tape.with_value(y, |t| t.data().iter().map(|&v| v as f64).sum());
            assert!((sum - 1.0).abs() < 1e-6, "row sum {sum} drifted");
        }
    }
}
