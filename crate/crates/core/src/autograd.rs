//! Reverse-mode differentiation over a closed set of tensor primitives.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles during a
//! forward pass. [`Var::backward`] then walks the record in reverse
//! creation order (a valid topological order, and a deterministic one) and
//! accumulates vector-Jacobian products.
//!
//! Parameters enter the tape through [`Tape::param`]. Frozen parameters are
//! recorded as constants, so they never receive gradient.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{contract_err, dim_err, Result};
use crate::kernels::{self, ConvGeometry};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// The registered primitive set. Every [`Var`] operation maps onto one of these.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Scale,
    AddRow,
    MulRow,
    MatMul,
    Transpose,
    Reshape,
    Gelu,
    Tanh,
    Softmax,
    Sum,
    MeanAxis,
    MinAxis,
    SliceCols,
    ConcatCols,
    Stack,
    ClampCols,
    DwConv3d,
    ChannelNorm,
    Trilinear,
    PairwiseL2,
    Otam,
    CrossEntropy,
}

impl Primitive {
    pub const ALL: [Primitive; 25] = [
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::AddRow,
        Primitive::MulRow,
        Primitive::MatMul,
        Primitive::Transpose,
        Primitive::Reshape,
        Primitive::Gelu,
        Primitive::Tanh,
        Primitive::Softmax,
        Primitive::Sum,
        Primitive::MeanAxis,
        Primitive::MinAxis,
        Primitive::SliceCols,
        Primitive::ConcatCols,
        Primitive::Stack,
        Primitive::ClampCols,
        Primitive::DwConv3d,
        Primitive::ChannelNorm,
        Primitive::Trilinear,
        Primitive::PairwiseL2,
        Primitive::Otam,
        Primitive::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::AddRow => "add_row",
            Primitive::MulRow => "mul_row",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Reshape => "reshape",
            Primitive::Gelu => "gelu",
            Primitive::Tanh => "tanh",
            Primitive::Softmax => "softmax_lastaxis",
            Primitive::Sum => "sum",
            Primitive::MeanAxis => "mean_axis",
            Primitive::MinAxis => "min_axis",
            Primitive::SliceCols => "slice_cols",
            Primitive::ConcatCols => "concat_cols",
            Primitive::Stack => "stack",
            Primitive::ClampCols => "clamp_cols",
            Primitive::DwConv3d => "dwconv3d",
            Primitive::ChannelNorm => "channel_norm",
            Primitive::Trilinear => "trilinear_sample",
            Primitive::PairwiseL2 => "pairwise_l2",
            Primitive::Otam => "otam",
            Primitive::CrossEntropy => "cross_entropy",
        }
    }
}

type NodeId = usize;

enum Op {
    Leaf,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, Real),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Gelu(NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    Sum(NodeId),
    MeanAxis { src: NodeId, outer: usize, len: usize, inner: usize },
    MinAxis { src: NodeId, argmin: Vec<usize> },
    SliceCols { src: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    Stack(Vec<NodeId>),
    ClampCols { src: NodeId, lo: Vec<Real>, hi: Vec<Real> },
    DwConv3d { x: NodeId, kernel: NodeId, bias: NodeId, geom: ConvGeometry },
    ChannelNorm { x: NodeId, xhat: Vec<Real>, inv_std: Vec<Real> },
    Trilinear { map: NodeId, points: NodeId, volume: [usize; 3] },
    PairwiseL2(NodeId, NodeId),
    Otam { d: NodeId, cells: Vec<(usize, usize)> },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<Real> },
}

impl Op {
    fn primitive(&self) -> Option<Primitive> {
        Some(match self {
            Op::Leaf | Op::Param(_) => return None,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::Scale(..) => Primitive::Scale,
            Op::AddRow(..) => Primitive::AddRow,
            Op::MulRow(..) => Primitive::MulRow,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Transpose(..) => Primitive::Transpose,
            Op::Reshape(..) => Primitive::Reshape,
            Op::Gelu(..) => Primitive::Gelu,
            Op::Tanh(..) => Primitive::Tanh,
            Op::Softmax(..) => Primitive::Softmax,
            Op::Sum(..) => Primitive::Sum,
            Op::MeanAxis { .. } => Primitive::MeanAxis,
            Op::MinAxis { .. } => Primitive::MinAxis,
            Op::SliceCols { .. } => Primitive::SliceCols,
            Op::ConcatCols(..) => Primitive::ConcatCols,
            Op::Stack(..) => Primitive::Stack,
            Op::ClampCols { .. } => Primitive::ClampCols,
            Op::DwConv3d { .. } => Primitive::DwConv3d,
            Op::ChannelNorm { .. } => Primitive::ChannelNorm,
            Op::Trilinear { .. } => Primitive::Trilinear,
            Op::PairwiseL2(..) => Primitive::PairwiseL2,
            Op::Otam { .. } => Primitive::Otam,
            Op::CrossEntropy { .. } => Primitive::CrossEntropy,
        })
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass. Confined to a single thread while recording;
/// a finished tape may be moved to another thread for its backward pass.
pub struct Tape<'s> {
    store: Option<&'s ParamStore>,
    nodes: RefCell<Vec<Node>>,
    corrupted: Option<Primitive>,
}

impl<'s> Tape<'s> {
    /// A tape with no parameter store; only inputs and constants.
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: RefCell::new(Vec::new()),
            corrupted: None,
        }
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    /// Test fixture: the backward rule of `primitive` is deliberately
    /// wrong (scaled by 1.5) on this tape.
    #[doc(hidden)]
    pub fn with_corrupted_rule(mut self, primitive: Primitive) -> Self {
        self.corrupted = Some(primitive);
        self
    }

    pub fn store(&self) -> Option<&'s ParamStore> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        nodes.len() - 1
    }

    fn value_of(&self, id: NodeId) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// A differentiable input (gradients are reported for it).
    pub fn input(&self, value: Tensor) -> Var<'_> {
        let id = self.push(value, Op::Leaf, true);
        Var { tape: self, id }
    }

    /// A constant input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let id = self.push(value, Op::Leaf, false);
        Var { tape: self, id }
    }

    /// Records the current value of a stored parameter.
    pub fn param(&self, id: ParamId) -> Var<'_> {
        let store = self.store.expect("tape has no parameter store");
        let p = store.get(id);
        let node = self.push(p.value.clone(), Op::Param(id), p.trainable);
        Var { tape: self, id: node }
    }

    /// Handle to a previously recorded value, by its [`Var::index`].
    pub fn var(&self, index: usize) -> Result<Var<'_>> {
        if index >= self.len() {
            return Err(contract_err!("no node {index} on a tape of {}", self.len()));
        }
        Ok(Var { tape: self, id: index })
    }

    /// Reverse pass seeded with `seed` at `root`.
    pub fn backward_from(&self, root: Var<'_>, seed: Tensor) -> Result<Backward> {
        let nodes = self.nodes.borrow();
        if seed.shape() != nodes[root.id].value.shape() {
            return Err(dim_err!(
                "backward seed shape {:?} does not match root {:?}",
                seed.shape(),
                nodes[root.id].value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(seed);
        let mut params = Gradients::default();
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut contributions = Vec::new();
            match &node.op {
                Op::Leaf => {}
                Op::Param(pid) => params.add(*pid, &g),
                op => {
                    contributions = vjp(op, &nodes, &node.value, &g)?;
                    if self.corrupted.is_some() && op.primitive() == self.corrupted {
                        for (_, t) in contributions.iter_mut() {
                            *t = t.map(|v| 1.5 * v);
                        }
                    }
                }
            }
            for (parent, contribution) in contributions {
                if !nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Backward { grads, params })
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a reverse pass: parameter gradients plus per-node gradients.
pub struct Backward {
    grads: Vec<Option<Tensor>>,
    params: Gradients,
}

impl Backward {
    pub fn params(&self) -> &Gradients {
        &self.params
    }

    pub fn into_params(self) -> Gradients {
        self.params
    }

    /// Gradient of the root with respect to `v`, if any flowed to it.
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape<'t>,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn as_matrix(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(dim_err!("{op}: expected a matrix, got shape {s:?}")),
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape<'t> {
        self.tape
    }

    /// Position on the tape; see [`Tape::var`].
    pub fn index(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn derive(&self, value: Tensor, op: Op, parents: &[NodeId]) -> Var<'t> {
        let rg = parents.iter().any(|&p| self.tape.needs_grad(p));
        let id = self.tape.push(value, op, rg);
        Var { tape: self.tape, id }
    }

    fn zip_with(self, other: Var<'t>, name: &str, f: impl Fn(Real, Real) -> Real) -> Result<Tensor> {
        let (a, b) = (self.value(), other.value());
        same_shape(name, &a, &b)?;
        Ok(Tensor::from_parts(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        ))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "add", |x, y| x + y)?;
        Ok(self.derive(v, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "sub", |x, y| x - y)?;
        Ok(self.derive(v, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "mul", |x, y| x * y)?;
        Ok(self.derive(v, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn scale(self, k: Real) -> Var<'t> {
        let v = self.value().map(|x| k * x);
        self.derive(v, Op::Scale(self.id, k), &[self.id])
    }

    fn row_broadcast(self, row: Var<'t>, name: &str, f: impl Fn(Real, Real) -> Real) -> Result<Tensor> {
        let (a, b) = (self.value(), row.value());
        let c = a.last_dim();
        if b.len() != c || b.rank() != 1 {
            return Err(dim_err!(
                "{name}: row of shape {:?} does not match last axis of {:?}",
                b.shape(),
                a.shape()
            ));
        }
        let mut data = a.data().to_vec();
        for r in data.chunks_mut(c) {
            for (x, &y) in r.iter_mut().zip(b.data()) {
                *x = f(*x, y);
            }
        }
        Ok(Tensor::from_parts(a.shape().to_vec(), data))
    }

    /// Adds a `[C]` row to every last-axis slice.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let v = self.row_broadcast(row, "add_row", |x, y| x + y)?;
        Ok(self.derive(v, Op::AddRow(self.id, row.id), &[self.id, row.id]))
    }

    /// Multiplies every last-axis slice by a `[C]` row.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let v = self.row_broadcast(row, "mul_row", |x, y| x * y)?;
        Ok(self.derive(v, Op::MulRow(self.id, row.id), &[self.id, row.id]))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = as_matrix("matmul", &a)?;
        let (k2, n) = as_matrix("matmul", &b)?;
        if k != k2 {
            return Err(dim_err!(
                "matmul: inner dimensions differ, {:?} x {:?}",
                a.shape(),
                b.shape()
            ));
        }
        let v = Tensor::from_parts(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n));
        Ok(self.derive(v, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = as_matrix("transpose", &a)?;
        let v = Tensor::from_parts(vec![c, r], kernels::transpose(a.data(), r, c));
        Ok(self.derive(v, Op::Transpose(self.id), &[self.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.derive(v, Op::Reshape(self.id), &[self.id]))
    }

    pub fn gelu(self) -> Var<'t> {
        let v = self.value().map(kernels::gelu);
        self.derive(v, Op::Gelu(self.id), &[self.id])
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().map(Real::tanh);
        self.derive(v, Op::Tanh(self.id), &[self.id])
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() == 0 {
            return Err(dim_err!("softmax needs a last axis"));
        }
        let v = Tensor::from_parts(a.shape().to_vec(), kernels::softmax_rows(a.data(), a.last_dim()));
        Ok(self.derive(v, Op::Softmax(self.id), &[self.id]))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.derive(v, Op::Sum(self.id), &[self.id])
    }

    fn split_axis(&self, axis: usize) -> Result<(Vec<usize>, usize, usize, usize)> {
        let a = self.value();
        let shape = a.shape();
        if axis >= shape.len() {
            return Err(dim_err!("axis {axis} out of range for shape {shape:?}"));
        }
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Ok((out_shape, outer, shape[axis], inner))
    }

    /// Mean over one axis, which is removed.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let (shape, outer, len, inner) = self.split_axis(axis)?;
        let a = self.value();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &a.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as Real);
        let op = Op::MeanAxis {
            src: self.id,
            outer,
            len,
            inner,
        };
        Ok(self.derive(Tensor::from_parts(shape, out), op, &[self.id]))
    }

    /// Minimum over one axis, which is removed. Ties go to the lowest index.
    pub fn min_axis(self, axis: usize) -> Result<Var<'t>> {
        let (shape, outer, len, inner) = self.split_axis(axis)?;
        let a = self.value();
        let mut out = vec![0.0; outer * inner];
        let mut argmin = vec![0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = a.data()[o * len * inner + i];
                for l in 1..len {
                    let v = a.data()[(o * len + l) * inner + i];
                    if v < best_v {
                        best = l;
                        best_v = v;
                    }
                }
                out[o * inner + i] = best_v;
                argmin[o * inner + i] = (o * len + best) * inner + i;
            }
        }
        let op = Op::MinAxis { src: self.id, argmin };
        Ok(self.derive(Tensor::from_parts(shape, out), op, &[self.id]))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = as_matrix("slice_cols", &a)?;
        if len == 0 || start + len > c {
            return Err(dim_err!("slice_cols {start}..{} out of {c} columns", start + len));
        }
        let data = a.data().chunks(c).flat_map(|row| row[start..start + len].to_vec()).collect();
        let op = Op::SliceCols { src: self.id, start };
        Ok(self.derive(Tensor::from_parts(vec![r, len], data), op, &[self.id]))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| contract_err!("concat_cols of nothing"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rows = as_matrix("concat_cols", &values[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for v in &values {
            let (r, c) = as_matrix("concat_cols", v)?;
            if r != rows {
                return Err(dim_err!("concat_cols: row counts {rows} and {r} differ"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[i * w..(i + 1) * w]);
            }
        }
        let ids: Vec<_> = parts.iter().map(|p| p.id).collect();
        Ok(first.derive(Tensor::from_parts(vec![rows, total], data), Op::ConcatCols(ids.clone()), &ids))
    }

    /// Stacks equally shaped values along a new leading axis.
    pub fn stack(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| contract_err!("stack of nothing"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let shape = values[0].shape().to_vec();
        let mut data = Vec::with_capacity(values.len() * values[0].len());
        for v in &values {
            if v.shape() != shape.as_slice() {
                return Err(dim_err!("stack: shapes {shape:?} and {:?} differ", v.shape()));
            }
            data.extend_from_slice(v.data());
        }
        let mut out_shape = vec![parts.len()];
        out_shape.extend(shape);
        let ids: Vec<_> = parts.iter().map(|p| p.id).collect();
        Ok(first.derive(Tensor::from_parts(out_shape, data), Op::Stack(ids.clone()), &ids))
    }

    /// Clamps column `j` of a matrix into `[lo[j], hi[j]]`.
    pub fn clamp_cols(self, lo: &[Real], hi: &[Real]) -> Result<Var<'t>> {
        let a = self.value();
        let (_, c) = as_matrix("clamp_cols", &a)?;
        if lo.len() != c || hi.len() != c {
            return Err(dim_err!("clamp_cols: bounds for {} columns, matrix has {c}", lo.len()));
        }
        let data = a
            .data()
            .chunks(c)
            .flat_map(|row| (0..c).map(|j| row[j].clamp(lo[j], hi[j])).collect::<Vec<_>>())
            .collect();
        let op = Op::ClampCols {
            src: self.id,
            lo: lo.to_vec(),
            hi: hi.to_vec(),
        };
        Ok(self.derive(Tensor::from_parts(a.shape().to_vec(), data), op, &[self.id]))
    }

    /// Depthwise 3D correlation of a `[T, H, W, C]` map with a
    /// `[C, kt, kh, kw]` kernel plus `[C]` bias, zero-padded by `(k-1)/2`.
    pub fn dwconv3d(self, kernel: Var<'t>, bias: Var<'t>, stride: [usize; 3]) -> Result<Var<'t>> {
        let (x, k, b) = (self.value(), kernel.value(), bias.value());
        let [t, h, w, c] = match x.shape() {
            &[t, h, w, c] => [t, h, w, c],
            s => return Err(dim_err!("dwconv3d: expected [T,H,W,C] input, got {s:?}")),
        };
        let ks = match k.shape() {
            &[kc, kt, kh, kw] if kc == c => [kt, kh, kw],
            s => return Err(dim_err!("dwconv3d: kernel {s:?} does not match {c} channels")),
        };
        if b.shape() != [c] {
            return Err(dim_err!("dwconv3d: bias {:?} does not match {c} channels", b.shape()));
        }
        let geom = ConvGeometry::same([t, h, w], c, ks, stride)?;
        let out = kernels::dwconv3d(x.data(), k.data(), b.data(), &geom);
        let [ot, oh, ow] = geom.output;
        let op = Op::DwConv3d {
            x: self.id,
            kernel: kernel.id,
            bias: bias.id,
            geom,
        };
        Ok(self.derive(
            Tensor::from_parts(vec![ot, oh, ow, c], out),
            op,
            &[self.id, kernel.id, bias.id],
        ))
    }

    /// Normalizes each channel (last axis) to zero mean and unit variance
    /// over all other positions.
    pub fn channel_norm(self, eps: Real) -> Result<Var<'t>> {
        let x = self.value();
        let c = x.last_dim();
        if x.rank() < 2 || x.len() / c < 2 {
            return Err(dim_err!("channel_norm needs at least 2 positions per channel, got {:?}", x.shape()));
        }
        let (xhat, inv_std) = kernels::channel_norm(x.data(), c, eps);
        let v = Tensor::from_parts(x.shape().to_vec(), xhat.clone());
        let op = Op::ChannelNorm {
            x: self.id,
            xhat,
            inv_std,
        };
        Ok(self.derive(v, op, &[self.id]))
    }

    /// Trilinear sampling of a `[T, H, W, C]` map at `[M, 3]` points.
    pub fn trilinear(self, points: Var<'t>) -> Result<Var<'t>> {
        let (map, pts) = (self.value(), points.value());
        let [t, h, w, c] = match map.shape() {
            &[t, h, w, c] => [t, h, w, c],
            s => return Err(dim_err!("trilinear: expected [T,H,W,C] map, got {s:?}")),
        };
        let (m, three) = as_matrix("trilinear points", &pts)?;
        if three != 3 {
            return Err(dim_err!("trilinear: points must be [M, 3], got {:?}", pts.shape()));
        }
        let out = kernels::trilinear_sample(map.data(), [t, h, w], c, pts.data())?;
        let op = Op::Trilinear {
            map: self.id,
            points: points.id,
            volume: [t, h, w],
        };
        Ok(self.derive(Tensor::from_parts(vec![m, c], out), op, &[self.id, points.id]))
    }

    /// `D[i][j] = ‖self_i − other_j‖₂` for row sets of equal width.
    pub fn pairwise_l2(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (r, d) = as_matrix("pairwise_l2", &a)?;
        let (c, d2) = as_matrix("pairwise_l2", &b)?;
        if d != d2 {
            return Err(dim_err!("pairwise_l2: feature widths {d} and {d2} differ"));
        }
        let v = Tensor::from_parts(vec![r, c], kernels::pairwise_l2(a.data(), b.data(), r, c, d));
        Ok(self.derive(v, Op::PairwiseL2(self.id, other.id), &[self.id, other.id]))
    }

    /// Symmetrized relaxed-boundary alignment cost of a distance matrix:
    /// the mean of the best monotone path cost through `D` and through `Dᵀ`.
    pub fn otam(self) -> Result<Var<'t>> {
        let d = self.value();
        let (r, c) = as_matrix("otam", &d)?;
        let (fwd, fwd_path) = kernels::relaxed_dtw(d.data(), r, c);
        let dt = kernels::transpose(d.data(), r, c);
        let (bwd, bwd_path) = kernels::relaxed_dtw(&dt, c, r);
        let mut cells = fwd_path;
        cells.extend(bwd_path.into_iter().map(|(i, j)| (j, i)));
        let v = Tensor::scalar(0.5 * (fwd + bwd));
        Ok(self.derive(v, Op::Otam { d: self.id, cells }, &[self.id]))
    }

    /// Mean cross-entropy of row-wise softmax(logits) against `labels`.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let z = self.value();
        let (b, n) = as_matrix("cross_entropy", &z)?;
        if labels.len() != b {
            return Err(dim_err!("cross_entropy: {} labels for {b} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(contract_err!("cross_entropy: label {bad} out of {n} classes"));
        }
        let probs = kernels::softmax_rows(z.data(), n);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs[i * n + l].ln())
            .sum::<Real>()
            / b as Real;
        let op = Op::CrossEntropy {
            logits: self.id,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.derive(Tensor::scalar(loss), op, &[self.id]))
    }

    /// Gradients of this scalar with respect to all trainable parameters.
    pub fn backward(self) -> Result<Gradients> {
        Ok(self.backward_full()?.into_params())
    }

    /// Like [`Var::backward`] but also exposes gradients of intermediate values.
    pub fn backward_full(self) -> Result<Backward> {
        let v = self.value();
        if v.len() != 1 {
            return Err(contract_err!("backward needs a scalar loss, got shape {:?}", v.shape()));
        }
        self.tape.backward_from(self, Tensor::ones(v.shape()))
    }
}

/// Vector-Jacobian products of one recorded op: `(parent, contribution)` pairs.
fn vjp(op: &Op, nodes: &[Node], out: &Tensor, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
    let val = |id: NodeId| nodes[id].value.clone();
    let like = |id: NodeId, data: Vec<Real>| Tensor::from_parts(nodes[id].value.shape().to_vec(), data);
    let zip = |a: &Tensor, b: &Tensor, f: fn(Real, Real) -> Real| -> Vec<Real> {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    };
    Ok(match op {
        Op::Leaf | Op::Param(_) => Vec::new(),
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            vec![
                (*a, like(*a, zip(g, &vb, |x, y| x * y))),
                (*b, like(*b, zip(g, &va, |x, y| x * y))),
            ]
        }
        Op::Scale(a, k) => vec![(*a, g.map(|v| k * v))],
        Op::AddRow(a, b) => {
            let c = g.last_dim();
            let mut gb = vec![0.0; c];
            for row in g.data().chunks(c) {
                for (s, v) in gb.iter_mut().zip(row) {
                    *s += v;
                }
            }
            vec![(*a, g.clone()), (*b, like(*b, gb))]
        }
        Op::MulRow(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let c = g.last_dim();
            let mut ga = Vec::with_capacity(g.len());
            let mut gb = vec![0.0; c];
            for (gr, ar) in g.data().chunks(c).zip(va.data().chunks(c)) {
                for j in 0..c {
                    ga.push(gr[j] * vb.data()[j]);
                    gb[j] += gr[j] * ar[j];
                }
            }
            vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k) = (va.shape()[0], va.shape()[1]);
            let n = vb.shape()[1];
            vec![
                (*a, like(*a, kernels::matmul_nt(g.data(), vb.data(), m, n, k))),
                (*b, like(*b, kernels::matmul_tn(va.data(), g.data(), m, k, n))),
            ]
        }
        Op::Transpose(a) => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            vec![(*a, like(*a, kernels::transpose(g.data(), r, c)))]
        }
        Op::Reshape(a) => vec![(*a, like(*a, g.data().to_vec()))],
        Op::Gelu(a) => {
            let va = val(*a);
            vec![(*a, like(*a, zip(g, &va, |gv, x| gv * kernels::gelu_grad(x))))]
        }
        Op::Tanh(a) => vec![(*a, like(*a, zip(g, out, |gv, y| gv * (1.0 - y * y))))],
        Op::Softmax(a) => vec![(
            *a,
            like(*a, kernels::softmax_rows_backward(out.data(), g.data(), out.last_dim())),
        )],
        Op::Sum(a) => {
            let s = g.data()[0];
            vec![(*a, like(*a, vec![s; nodes[*a].value.len()]))]
        }
        Op::MeanAxis { src, outer, len, inner } => {
            let mut ga = vec![0.0; outer * len * inner];
            for o in 0..*outer {
                let gs = &g.data()[o * inner..(o + 1) * inner];
                for l in 0..*len {
                    let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (d, v) in dst.iter_mut().zip(gs) {
                        *d = v / *len as Real;
                    }
                }
            }
            vec![(*src, like(*src, ga))]
        }
        Op::MinAxis { src, argmin } => {
            let mut ga = vec![0.0; nodes[*src].value.len()];
            for (&idx, &v) in argmin.iter().zip(g.data()) {
                ga[idx] += v;
            }
            vec![(*src, like(*src, ga))]
        }
        Op::SliceCols { src, start } => {
            let c = nodes[*src].value.shape()[1];
            let len = out.shape()[1];
            let mut ga = vec![0.0; nodes[*src].value.len()];
            for (dst, row) in ga.chunks_mut(c).zip(g.data().chunks(len)) {
                dst[*start..start + len].copy_from_slice(row);
            }
            vec![(*src, like(*src, ga))]
        }
        Op::ConcatCols(parts) => {
            let total = out.shape()[1];
            let mut offset = 0;
            let mut res = Vec::with_capacity(parts.len());
            for &p in parts {
                let w = nodes[p].value.shape()[1];
                let data = g
                    .data()
                    .chunks(total)
                    .flat_map(|row| row[offset..offset + w].to_vec())
                    .collect();
                res.push((p, like(p, data)));
                offset += w;
            }
            res
        }
        Op::Stack(parts) => {
            let each = g.len() / parts.len();
            parts
                .iter()
                .enumerate()
                .map(|(i, &p)| (p, like(p, g.data()[i * each..(i + 1) * each].to_vec())))
                .collect()
        }
        Op::ClampCols { src, lo, hi } => {
            let va = val(*src);
            let c = lo.len();
            let data = va
                .data()
                .iter()
                .zip(g.data())
                .enumerate()
                .map(|(i, (&x, &gv))| {
                    let j = i % c;
                    if x >= lo[j] && x <= hi[j] {
                        gv
                    } else {
                        0.0
                    }
                })
                .collect();
            vec![(*src, like(*src, data))]
        }
        Op::DwConv3d { x, kernel, bias, geom } => {
            let (vx, vk) = (val(*x), val(*kernel));
            let (dx, dk, db) = kernels::dwconv3d_backward(vx.data(), vk.data(), g.data(), geom);
            vec![(*x, like(*x, dx)), (*kernel, like(*kernel, dk)), (*bias, like(*bias, db))]
        }
        Op::ChannelNorm { x, xhat, inv_std } => {
            let dx = kernels::channel_norm_backward(xhat, inv_std, g.data(), inv_std.len());
            vec![(*x, like(*x, dx))]
        }
        Op::Trilinear { map, points, volume } => {
            let (vm, vp) = (val(*map), val(*points));
            let c = vm.last_dim();
            let (dm, dp) = kernels::trilinear_sample_backward(vm.data(), *volume, c, vp.data(), g.data());
            vec![(*map, like(*map, dm)), (*points, like(*points, dp))]
        }
        Op::PairwiseL2(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (r, d) = (va.shape()[0], va.shape()[1]);
            let c = vb.shape()[0];
            let mut ga = vec![0.0; va.len()];
            let mut gb = vec![0.0; vb.len()];
            for i in 0..r {
                for j in 0..c {
                    let dist = out.data()[i * c + j];
                    if dist == 0.0 {
                        continue;
                    }
                    let s = g.data()[i * c + j] / dist;
                    for k in 0..d {
                        let diff = va.data()[i * d + k] - vb.data()[j * d + k];
                        ga[i * d + k] += s * diff;
                        gb[j * d + k] -= s * diff;
                    }
                }
            }
            vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
        }
        Op::Otam { d, cells } => {
            let c = nodes[*d].value.shape()[1];
            let s = 0.5 * g.data()[0];
            let mut gd = vec![0.0; nodes[*d].value.len()];
            for &(i, j) in cells {
                gd[i * c + j] += s;
            }
            vec![(*d, like(*d, gd))]
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let n = nodes[*logits].value.shape()[1];
            let b = labels.len() as Real;
            let s = g.data()[0] / b;
            let mut gz: Vec<Real> = probs.iter().map(|p| p * s).collect();
            for (i, &l) in labels.iter().enumerate() {
                gz[i * n + l] -= s;
            }
            vec![(*logits, like(*logits, gz))]
        }
    })
}
