//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node appended to a tape. Inputs
//! always precede their consumers, so the tape order is a topological order
//! and [`Graph::backward`] simply walks it in reverse. Gradients from fan-out
//! are summed.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_nt, gemm_tn, lanes, Tensor};

/// Gather index meaning "this output element is zero".
pub const ZERO_INDEX: usize = usize::MAX;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Log,
    Sqrt,
    Tanh,
    Sigmoid,
    Relu,
    Silu,
    Abs,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Sparse linear map: output element `r` is `Σ w · x[i]` over row `r`'s taps.
#[derive(Clone, Debug, Default)]
pub struct Taps {
    offsets: Vec<usize>,
    entries: Vec<(usize, f64)>,
}

impl Taps {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, index: usize, weight: f64) {
        self.entries.push((index, weight));
    }

    pub fn end_row(&mut self) {
        self.offsets.push(self.entries.len());
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, r: usize) -> &[(usize, f64)] {
        &self.entries[self.offsets[r]..self.offsets[r + 1]]
    }
}

enum Op {
    Leaf,
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        a_map: Option<Rc<Vec<usize>>>,
        b_map: Option<Rc<Vec<usize>>>,
    },
    Scale(Var, f64),
    Offset(Var),
    Unary(Var, Unary),
    Clamp(Var, f64, f64),
    Matmul(Var, Var),
    Sum(Var),
    SumAxis(Var, usize),
    MaxAxis(Var, Vec<usize>),
    Softmax(Var, usize),
    LayerNorm(Var, usize, Vec<f64>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Gather(Var, Rc<Vec<usize>>),
    Resample(Var, Rc<Taps>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Computation tape. Single-writer; independent graphs may live on separate threads.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    bound: RefCell<HashMap<usize, Var>>,
}

fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(Error::InvalidAxis { axis, rank });
    }
    Ok(())
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat offset into a tensor of shape `inp` for every element of `out`,
/// following right-aligned broadcasting.
fn broadcast_map(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let shift = rank - inp.len();
    let mut strides = vec![0; rank];
    let mut s = 1;
    for i in (0..inp.len()).rev() {
        strides[i + shift] = if inp[i] == 1 { 0 } else { s };
        s *= inp[i];
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    map
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Binary { a, b, .. } | Op::Matmul(a, b) => {
                nodes[a.0].needs_grad || nodes[b.0].needs_grad
            }
            Op::Concat(xs, _) => xs.iter().any(|x| nodes[x.0].needs_grad),
            Op::Scale(x, _)
            | Op::Offset(x)
            | Op::Unary(x, _)
            | Op::Clamp(x, _, _)
            | Op::Sum(x)
            | Op::SumAxis(x, _)
            | Op::MaxAxis(x, _)
            | Op::Softmax(x, _)
            | Op::LayerNorm(x, _, _)
            | Op::Reshape(x)
            | Op::Gather(x, _)
            | Op::Resample(x, _) => nodes[x.0].needs_grad,
        };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn leaf(&self, value: Tensor, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn variable(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Binds a stored parameter as a tracked leaf; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.borrow().get(&id.index()) {
            return v;
        }
        let v = self.variable(store.get(id).clone());
        self.bound.borrow_mut().insert(id.index(), v);
        v
    }

    /// Copy of `x`'s value with the gradient path cut.
    pub fn detach(&self, x: Var) -> Var {
        let value = self.value(x);
        self.constant((*value).clone())
    }

    pub fn value(&self, x: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[x.0].value)
    }

    pub fn shape(&self, x: Var) -> Vec<usize> {
        self.nodes.borrow()[x.0].value.shape().to_vec()
    }

    pub fn scalar_value(&self, x: Var) -> Result<f64> {
        self.value(x).item()
    }

    // ---- elementwise ------------------------------------------------------

    fn binary(&self, kind: Binary, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape =
            broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| Error::ShapeMismatch {
                op: name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            })?;
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let a_map = (va.shape() != out_shape.as_slice())
            .then(|| Rc::new(broadcast_map(&out_shape, va.shape())));
        let b_map = (vb.shape() != out_shape.as_slice())
            .then(|| Rc::new(broadcast_map(&out_shape, vb.shape())));
        let total: usize = out_shape.iter().product();
        let (da, db) = (va.data(), vb.data());
        let data: Vec<f64> = (0..total)
            .map(|i| {
                let ia = a_map.as_ref().map_or(i, |m| m[i]);
                let ib = b_map.as_ref().map_or(i, |m| m[i]);
                f(da[ia], db[ib])
            })
            .collect();
        let value = Tensor::new(&out_shape, data)?;
        self.push(
            value,
            Op::Binary {
                kind,
                a,
                b,
                a_map,
                b_map,
            },
            name,
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b, "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, "mul")
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b, "div")
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).map(|t| t * c);
        self.push(v, Op::Scale(x, c), "scale")
    }

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).map(|t| t + c);
        self.push(v, Op::Offset(x), "add_scalar")
    }

    pub fn unary(&self, x: Var, kind: Unary) -> Result<Var> {
        let f = |v: f64| match kind {
            Unary::Exp => v.exp(),
            Unary::Log => v.ln(),
            Unary::Sqrt => v.sqrt(),
            Unary::Tanh => v.tanh(),
            Unary::Sigmoid => sigmoid(v),
            Unary::Relu => v.max(0.0),
            Unary::Silu => v * sigmoid(v),
            Unary::Abs => v.abs(),
            Unary::Square => v * v,
        };
        let value = self.value(x).map(f);
        let name = match kind {
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Sqrt => "sqrt",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
            Unary::Silu => "silu",
            Unary::Abs => "abs",
            Unary::Square => "square",
        };
        self.push(value, Op::Unary(x, kind), name)
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }
    pub fn log(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }
    pub fn sqrt(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sqrt)
    }
    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }
    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }
    pub fn silu(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Silu)
    }
    pub fn abs(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }
    pub fn square(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp(x, lo, hi), "clamp")
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = crate::tensor::matmul(&va, &vb)?;
        self.push(value, Op::Matmul(a, b), "matmul")
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "transpose needs rank 2, got {shape:?}"
            )));
        }
        self.permute(x, &[1, 0])
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&self, x: Var) -> Result<Var> {
        let total = self.value(x).sum();
        self.push(Tensor::scalar(total), Op::Sum(x), "sum")
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::EmptyAxis { op: "mean", axis: 0 });
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        check_axis(axis, vx.rank())?;
        let (outer, len, inner) = lanes(vx.shape(), axis);
        let d = vx.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        self.push(Tensor::new(&shape, out)?, Op::SumAxis(x, axis), "sum_axis")
    }

    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x);
        check_axis(axis, shape.len())?;
        if shape[axis] == 0 {
            return Err(Error::EmptyAxis { op: "mean_axis", axis });
        }
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / shape[axis] as f64)
    }

    /// Max over `axis`, removing it. Ties resolve to the first index.
    pub fn max_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        check_axis(axis, vx.rank())?;
        let (outer, len, inner) = lanes(vx.shape(), axis);
        if len == 0 {
            return Err(Error::EmptyAxis { op: "max_axis", axis });
        }
        let d = vx.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * len) * inner + i;
                for a in 1..len {
                    let idx = (o * len + a) * inner + i;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out.push(d[best]);
                argmax.push(best);
            }
        }
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        self.push(Tensor::new(&shape, out)?, Op::MaxAxis(x, argmax), "max_axis")
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        check_axis(axis, vx.rank())?;
        let (outer, len, inner) = lanes(vx.shape(), axis);
        if len == 0 {
            return Err(Error::EmptyAxis { op: "softmax", axis });
        }
        let d = vx.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let m = (0..len).map(|a| d[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..len {
                    let e = (d[at(a)] - m).exp();
                    out[at(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    out[at(a)] /= z;
                }
            }
        }
        self.push(Tensor::new(vx.shape(), out)?, Op::Softmax(x, axis), "softmax")
    }

    /// Zero-mean unit-variance normalization along `axis` (biased variance, `eps` inside the root).
    pub fn layer_norm(&self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        check_axis(axis, vx.rank())?;
        let (outer, len, inner) = lanes(vx.shape(), axis);
        if len == 0 {
            return Err(Error::EmptyAxis { op: "layer_norm", axis });
        }
        let d = vx.data();
        let mut out = vec![0.0; d.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mean = (0..len).map(|a| d[at(a)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|a| (d[at(a)] - mean).powi(2)).sum::<f64>() / len as f64;
                let r = 1.0 / (var + eps).sqrt();
                for a in 0..len {
                    out[at(a)] = (d[at(a)] - mean) * r;
                }
                inv_std.push(r);
            }
        }
        self.push(
            Tensor::new(vx.shape(), out)?,
            Op::LayerNorm(x, axis, inv_std),
            "layer_norm",
        )
    }

    // ---- structural -------------------------------------------------------

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        self.push(v, Op::Reshape(x), "reshape")
    }

    /// Generalized transpose: output axis `k` is input axis `perm[k]`.
    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(format!(
                "permutation {perm:?} invalid for rank {rank}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut in_strides = vec![1; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * shape[d + 1];
        }
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let total: usize = shape.iter().product();
        let mut index = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..total {
            index.push(off);
            for d in (0..rank).rev() {
                idx[d] += 1;
                off += strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        self.gather(x, Rc::new(index), &out_shape)
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(*first);
        check_axis(axis, base.len())?;
        let values: Vec<Rc<Tensor>> = xs.iter().map(|&x| self.value(x)).collect();
        let mut total_axis = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total_axis += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total_axis;
        let (outer, _, inner) = lanes(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        self.push(
            Tensor::new(&out_shape, out)?,
            Op::Concat(xs.to_vec(), axis),
            "concat",
        )
    }

    /// Contiguous slice `[start, start+len)` of `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x);
        check_axis(axis, shape.len())?;
        if start + len > shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{} exceeds axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = lanes(&shape, axis);
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for a in start..start + len {
                let base = (o * n + a) * inner;
                index.extend(base..base + inner);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(x, Rc::new(index), &out_shape)
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == ZERO_INDEX`.
    pub fn gather(&self, x: Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let total: usize = shape.iter().product();
        if index.len() != total {
            return Err(Error::DataLength {
                len: index.len(),
                shape: shape.to_vec(),
            });
        }
        let d = vx.data();
        let mut out = Vec::with_capacity(total);
        for &i in index.iter() {
            if i == ZERO_INDEX {
                out.push(0.0);
            } else if i < d.len() {
                out.push(d[i]);
            } else {
                return Err(Error::InvalidArgument(format!(
                    "gather index {i} out of range for {} elements",
                    d.len()
                )));
            }
        }
        self.push(Tensor::new(shape, out)?, Op::Gather(x, index), "gather")
    }

    /// Applies a fixed sparse linear map (interpolation, pooling).
    pub fn resample(&self, x: Var, taps: Rc<Taps>, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let total: usize = shape.iter().product();
        if taps.rows() != total {
            return Err(Error::DataLength {
                len: taps.rows(),
                shape: shape.to_vec(),
            });
        }
        let d = vx.data();
        let mut out = Vec::with_capacity(total);
        for r in 0..total {
            let mut acc = 0.0;
            for &(i, w) in taps.row(r) {
                let v = d.get(i).ok_or_else(|| {
                    Error::InvalidArgument(format!("resample tap {i} out of range"))
                })?;
                acc += w * v;
            }
            out.push(acc);
        }
        self.push(Tensor::new(shape, out)?, Op::Resample(x, taps), "resample")
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a one-element root. Gradients are readable through
    /// [`Graph::grad`] afterwards; a second call replaces them.
    pub fn backward(&self, root: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.0] = Some(Tensor::ones(root_value.shape()));

        for n in (0..=root.0).rev() {
            let node = &nodes[n];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[n].take() else {
                continue;
            };
            let g = g.data();
            let y = node.value.data();
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                let target = &nodes[v.0];
                if !target.needs_grad {
                    return;
                }
                let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(target.value.shape()));
                f(slot.data_mut());
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Binary {
                    kind,
                    a,
                    b,
                    a_map,
                    b_map,
                } => {
                    let da = nodes[a.0].value.data();
                    let db = nodes[b.0].value.data();
                    let ia = |i: usize| a_map.as_ref().map_or(i, |m| m[i]);
                    let ib = |i: usize| b_map.as_ref().map_or(i, |m| m[i]);
                    acc(*a, &mut |ga| {
                        for i in 0..g.len() {
                            ga[ia(i)] += match kind {
                                Binary::Add | Binary::Sub => g[i],
                                Binary::Mul => g[i] * db[ib(i)],
                                Binary::Div => g[i] / db[ib(i)],
                            };
                        }
                    });
                    acc(*b, &mut |gb| {
                        for i in 0..g.len() {
                            gb[ib(i)] += match kind {
                                Binary::Add => g[i],
                                Binary::Sub => -g[i],
                                Binary::Mul => g[i] * da[ia(i)],
                                Binary::Div => -g[i] * da[ia(i)] / (db[ib(i)] * db[ib(i)]),
                            };
                        }
                    });
                }
                Op::Scale(x, c) => acc(*x, &mut |gx| {
                    for (o, gi) in gx.iter_mut().zip(g) {
                        *o += c * gi;
                    }
                }),
                Op::Offset(x) | Op::Reshape(x) => acc(*x, &mut |gx| {
                    for (o, gi) in gx.iter_mut().zip(g) {
                        *o += gi;
                    }
                }),
                Op::Unary(x, kind) => {
                    let dx = nodes[x.0].value.data();
                    acc(*x, &mut |gx| {
                        for i in 0..g.len() {
                            let (xv, yv) = (dx[i], y[i]);
                            let local = match kind {
                                Unary::Exp => yv,
                                Unary::Log => 1.0 / xv,
                                Unary::Sqrt => 0.5 / yv,
                                Unary::Tanh => 1.0 - yv * yv,
                                Unary::Sigmoid => yv * (1.0 - yv),
                                Unary::Relu => {
                                    if xv > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Silu => {
                                    let s = sigmoid(xv);
                                    s + xv * s * (1.0 - s)
                                }
                                Unary::Abs => {
                                    if xv > 0.0 {
                                        1.0
                                    } else if xv < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Square => 2.0 * xv,
                            };
                            gx[i] += g[i] * local;
                        }
                    });
                }
                Op::Clamp(x, lo, hi) => {
                    let dx = nodes[x.0].value.data();
                    acc(*x, &mut |gx| {
                        for i in 0..g.len() {
                            if dx[i] > *lo && dx[i] < *hi {
                                gx[i] += g[i];
                            }
                        }
                    });
                }
                Op::Matmul(a, b) => {
                    let va = &nodes[a.0].value;
                    let vb = &nodes[b.0].value;
                    let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    acc(*a, &mut |ga| gemm_nt(g, vb.data(), ga, m, n, k));
                    acc(*b, &mut |gb| gemm_tn(va.data(), g, gb, k, m, n));
                }
                Op::Sum(x) => acc(*x, &mut |gx| {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }),
                Op::SumAxis(x, axis) => {
                    let (outer, len, inner) = lanes(nodes[x.0].value.shape(), *axis);
                    acc(*x, &mut |gx| {
                        for o in 0..outer {
                            for a in 0..len {
                                for i in 0..inner {
                                    gx[(o * len + a) * inner + i] += g[o * inner + i];
                                }
                            }
                        }
                    });
                }
                Op::MaxAxis(x, argmax) => acc(*x, &mut |gx| {
                    for (i, &src) in argmax.iter().enumerate() {
                        gx[src] += g[i];
                    }
                }),
                Op::Softmax(x, axis) => {
                    let (outer, len, inner) = lanes(node.value.shape(), *axis);
                    acc(*x, &mut |gx| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |a: usize| (o * len + a) * inner + i;
                                let dot: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                                for a in 0..len {
                                    gx[at(a)] += y[at(a)] * (g[at(a)] - dot);
                                }
                            }
                        }
                    });
                }
                Op::LayerNorm(x, axis, inv_std) => {
                    let (outer, len, inner) = lanes(node.value.shape(), *axis);
                    acc(*x, &mut |gx| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |a: usize| (o * len + a) * inner + i;
                                let r = inv_std[o * inner + i];
                                let mg = (0..len).map(|a| g[at(a)]).sum::<f64>() / len as f64;
                                let mgy =
                                    (0..len).map(|a| g[at(a)] * y[at(a)]).sum::<f64>() / len as f64;
                                for a in 0..len {
                                    gx[at(a)] += r * (g[at(a)] - mg - y[at(a)] * mgy);
                                }
                            }
                        }
                    });
                }
                Op::Concat(xs, axis) => {
                    let out_shape = node.value.shape();
                    let (outer, total, inner) = lanes(out_shape, *axis);
                    let mut start = 0;
                    for x in xs {
                        let len = nodes[x.0].value.shape()[*axis];
                        acc(*x, &mut |gx| {
                            for o in 0..outer {
                                let src = (o * total + start) * inner;
                                let dst = o * len * inner;
                                for k in 0..len * inner {
                                    gx[dst + k] += g[src + k];
                                }
                            }
                        });
                        start += len;
                    }
                }
                Op::Gather(x, index) => acc(*x, &mut |gx| {
                    for (i, &src) in index.iter().enumerate() {
                        if src != ZERO_INDEX {
                            gx[src] += g[i];
                        }
                    }
                }),
                Op::Resample(x, taps) => acc(*x, &mut |gx| {
                    for (r, gr) in g.iter().enumerate() {
                        for &(i, w) in taps.row(r) {
                            gx[i] += w * gr;
                        }
                    }
                }),
            }
        }
        drop(nodes);
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of the last backward root with respect to `x`; zeros when `x`
    /// is disconnected from the root.
    pub fn grad(&self, x: Var) -> Tensor {
        let grads = self.grads.borrow();
        match grads.get(x.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes.borrow()[x.0].value.shape()),
        }
    }

    /// Gradients for every stored parameter, indexed by [`ParamId`]. Parameters
    /// never bound into this graph get `None`.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        let bound = self.bound.borrow();
        (0..store.len())
            .map(|i| bound.get(&i).map(|&v| self.grad(v)))
            .collect()
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
