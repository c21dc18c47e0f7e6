//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every primitive application appends a node to a [`Tape`]. Nodes are
//! stored in creation order, so the tape is topologically sorted by
//! construction and [`Tape::backward`] is a single reverse sweep.
//!
//! Binary elementwise primitives broadcast numpy-style. Axis reductions keep
//! the reduced axis with length 1 so their results broadcast back against the
//! input. Gradients of a value consumed more than once are summed.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{axis_split, broadcast_shape, gemm, reduce_broadcast, BroadcastMap, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

/// The primitive operation set, with per-op attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Maximum,
    Minimum,
    /// `[m, k] x [k, n]`.
    MatMul,
    /// Cross-correlation of `x: [T, Cin]` with `w: [k, Cin, Cout]`.
    Conv1d {
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    },
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Abs,
    Pow(f32),
    /// `scale * x + shift`.
    Affine {
        scale: f32,
        shift: f32,
    },
    Clamp {
        lo: f32,
        hi: f32,
    },
    Softmax {
        axis: usize,
    },
    Concat {
        axis: usize,
    },
    Sum {
        axis: usize,
    },
    SumAll,
    Mean {
        axis: usize,
    },
    Max {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    Broadcast {
        shape: Vec<usize>,
    },
    Reshape {
        shape: Vec<usize>,
    },
    /// Swaps the two axes of a matrix.
    Transpose,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Maximum => "maximum",
            Primitive::Minimum => "minimum",
            Primitive::MatMul => "matmul",
            Primitive::Conv1d { .. } => "conv1d",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sqrt => "sqrt",
            Primitive::Abs => "abs",
            Primitive::Pow(_) => "pow",
            Primitive::Affine { .. } => "affine",
            Primitive::Clamp { .. } => "clamp",
            Primitive::Softmax { .. } => "softmax",
            Primitive::Concat { .. } => "concat",
            Primitive::Sum { .. } => "sum",
            Primitive::SumAll => "sum_all",
            Primitive::Mean { .. } => "mean",
            Primitive::Max { .. } => "max",
            Primitive::Slice { .. } => "slice",
            Primitive::Broadcast { .. } => "broadcast",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Transpose => "transpose",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Div
            | Primitive::Maximum
            | Primitive::Minimum
            | Primitive::MatMul
            | Primitive::Conv1d { .. } => Some(2),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

enum Saved {
    Nothing,
    Im2col(Vec<f32>),
    Argmax(Vec<usize>),
}

struct Node {
    value: Tensor,
    /// Unrounded value of scalar reductions and scalar arithmetic on them.
    exact: Option<f64>,
    prim: Option<Primitive>,
    inputs: Vec<usize>,
    saved: Saved,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            exact: None,
            prim: None,
            inputs: Vec::new(),
            saved: Saved::Nothing,
            requires_grad,
        })
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f32) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn push(&mut self, node: Node) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(node);
        Var { tape: self.id, idx }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::Dangling(v.index()));
        }
        Ok(v.index())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index()].value
    }

    /// Value of a one-element variable before its final rounding to `f32`,
    /// where the tape tracked it (scalar reductions and arithmetic on them).
    pub fn value_f64(&self, v: Var) -> f64 {
        let node = &self.nodes[v.index()];
        node.exact.unwrap_or_else(|| f64::from(node.value.item()))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }

    /// Which branch every element of every recorded piecewise op took: relu
    /// and abs sign, clamp region, the winner of an elementwise
    /// maximum/minimum, the position of an axis max. Two evaluation points
    /// with equal patterns lie on the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let Some(prim) = &node.prim else { continue };
            let x = |k: usize| &self.nodes[node.inputs[k]].value;
            match prim {
                Primitive::Relu => out.extend(x(0).data().iter().map(|&v| u32::from(v > 0.0))),
                Primitive::Abs => out.extend(x(0).data().iter().map(|&v| u32::from(v >= 0.0))),
                Primitive::Clamp { lo, hi } => {
                    out.extend(x(0).data().iter().map(|&v| u32::from(v > *lo) + u32::from(v > *hi)))
                }
                Primitive::Maximum | Primitive::Minimum => {
                    let (a, b) = (x(0), x(1));
                    let shape = node.value.shape();
                    let (ma, mb) = (BroadcastMap::new(a.shape(), shape), BroadcastMap::new(b.shape(), shape));
                    out.extend(
                        (0..node.value.numel()).map(|i| u32::from(a.data()[ma.at(i)] >= b.data()[mb.at(i)])),
                    );
                }
                Primitive::Max { .. } => {
                    if let Saved::Argmax(idx) = &node.saved {
                        out.extend(idx.iter().map(|&i| i as u32));
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Applies one primitive and records it.
    ///
    /// Fails on invalid shapes and on any non-finite forward output.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = prim.arity() {
            if inputs.len() != n {
                return Err(Error::shape(
                    prim.name(),
                    format!("expected {n} inputs, got {}", inputs.len()),
                ));
            }
        } else if inputs.is_empty() {
            return Err(Error::shape(prim.name(), "no inputs"));
        }
        let mut ids = Vec::with_capacity(inputs.len());
        for &v in inputs {
            ids.push(self.check(v)?);
        }
        let requires_grad = ids.iter().any(|&i| self.nodes[i].requires_grad);
        let (value, saved) = {
            let vals: Vec<&Tensor> = ids.iter().map(|&i| &self.nodes[i].value).collect();
            forward(&prim, &vals)?
        };
        if !value.is_finite() {
            let stats = ids
                .iter()
                .map(|&i| self.nodes[i].value.stats())
                .collect::<Vec<_>>()
                .join("; ");
            return Err(Error::NonFinite {
                op: prim.name(),
                stats: format!("inputs: {stats}"),
            });
        }
        let saved = if requires_grad { saved } else { Saved::Nothing };
        let exact = self.exact_scalar(&prim, &ids, &value);
        Ok(self.push(Node {
            value,
            exact,
            prim: Some(prim),
            inputs: ids,
            saved,
            requires_grad,
        }))
    }

    fn exact_scalar(&self, prim: &Primitive, ids: &[usize], value: &Tensor) -> Option<f64> {
        if value.numel() != 1 {
            return None;
        }
        let input = |k: usize| {
            let node = &self.nodes[ids[k]];
            node.exact.unwrap_or_else(|| f64::from(node.value.data()[0]))
        };
        let all_scalar = ids.iter().all(|&i| self.nodes[i].value.numel() == 1);
        match prim {
            Primitive::SumAll | Primitive::Sum { .. } | Primitive::Mean { .. } => {
                let x = &self.nodes[ids[0]].value;
                let s: f64 = x.data().iter().map(|&v| f64::from(v)).sum();
                let s = if matches!(prim, Primitive::Mean { .. }) {
                    s / x.numel() as f64
                } else {
                    s
                };
                Some(if all_scalar { input(0) } else { s })
            }
            _ if !all_scalar => None,
            Primitive::Add => Some(input(0) + input(1)),
            Primitive::Sub => Some(input(0) - input(1)),
            Primitive::Mul => Some(input(0) * input(1)),
            Primitive::Div => Some(input(0) / input(1)),
            Primitive::Affine { scale, shift } => {
                Some(f64::from(*scale) * input(0) + f64::from(*shift))
            }
            Primitive::Reshape { .. } => Some(input(0)),
            _ => None,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Div, &[a, b])
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Maximum, &[a, b])
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Minimum, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Var> {
        self.apply(
            Primitive::Conv1d {
                stride,
                pad_left,
                pad_right,
            },
            &[x, w],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sqrt, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Abs, &[x])
    }

    pub fn pow(&mut self, x: Var, p: f32) -> Result<Var> {
        self.apply(Primitive::Pow(p), &[x])
    }

    pub fn affine(&mut self, x: Var, scale: f32, shift: f32) -> Result<Var> {
        self.apply(Primitive::Affine { scale, shift }, &[x])
    }

    pub fn scale(&mut self, x: Var, scale: f32) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 0.0)
    }

    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Result<Var> {
        self.apply(Primitive::Clamp { lo, hi }, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Softmax { axis }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat { axis }, xs)
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Sum { axis }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::SumAll, &[x])
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Mean { axis }, &[x])
    }

    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Max { axis }, &[x])
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Primitive::Slice { axis, start, len }, &[x])
    }

    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            Primitive::Broadcast {
                shape: shape.to_vec(),
            },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            Primitive::Reshape {
                shape: shape.to_vec(),
            },
            &[x],
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Transpose, &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every trainable leaf on the tape receives a gradient; leaves that do
    /// not influence `loss` get zeros. The tape is not modified, so calling
    /// this twice yields identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.check(loss)?;
        let loss_val = &self.nodes[li].value;
        if loss_val.numel() != 1 {
            return Err(Error::NotScalar(loss_val.shape().to_vec()));
        }
        let mut pending: Vec<Option<Vec<f32>>> = Vec::new();
        pending.resize_with(li + 1, || None);
        if self.nodes[li].requires_grad {
            pending[li] = Some(vec![1.0]);
        }
        let mut leaf_grads: Vec<Option<Tensor>> = Vec::new();
        leaf_grads.resize_with(self.nodes.len(), || None);

        for i in (0..=li).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            let Some(prim) = &node.prim else {
                if node.requires_grad {
                    leaf_grads[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let wants: Vec<bool> = node
                .inputs
                .iter()
                .map(|&j| self.nodes[j].requires_grad)
                .collect();
            let contribs = backward_node(prim, &inputs, &wants, &node.value, &node.saved, &g);
            for (&j, c) in node.inputs.iter().zip(contribs) {
                if let Some(c) = c {
                    match &mut pending[j] {
                        Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.prim.is_none() && node.requires_grad && leaf_grads[i].is_none() {
                leaf_grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: leaf_grads,
        })
    }
}

/// Gradients of one loss with respect to every trainable leaf of a tape.
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index()).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index()).and_then(Option::take)
    }
}

fn binary_forward(
    prim: &Primitive,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f32, f32) -> f32,
) -> Result<Tensor> {
    let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
        Error::shape(
            prim.name(),
            format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
        )
    })?;
    let n: usize = shape.iter().product();
    let ma = BroadcastMap::new(a.shape(), &shape);
    let mb = BroadcastMap::new(b.shape(), &shape);
    let (ad, bd) = (a.data(), b.data());
    let out = match (&ma, &mb) {
        (BroadcastMap::Same, BroadcastMap::Same) => {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        }
        _ => (0..n).map(|i| f(ad[ma.at(i)], bd[mb.at(i)])).collect(),
    };
    Ok(Tensor::from_parts(shape, out))
}

fn unary(x: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

/// Evaluates in double precision and rounds once.
fn unary64(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    unary(x, |v| f(f64::from(v)) as f32)
}

fn check_axis(prim: &Primitive, x: &Tensor, axis: usize) -> Result<()> {
    if axis >= x.rank() {
        return Err(Error::shape(
            prim.name(),
            format!("axis {axis} out of range for shape {:?}", x.shape()),
        ));
    }
    Ok(())
}

fn keep_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[axis] = 1;
    s
}

/// Output length of a padded strided 1-D correlation.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad_left: usize, pad_right: usize) -> usize {
    let padded = len + pad_left + pad_right;
    if padded < kernel || stride == 0 {
        0
    } else {
        (padded - kernel) / stride + 1
    }
}

fn im2col(x: &Tensor, k: usize, stride: usize, pad_left: usize, t_out: usize) -> Vec<f32> {
    let (t_in, cin) = (x.shape()[0], x.shape()[1]);
    let mut cols = vec![0f32; t_out * k * cin];
    for t in 0..t_out {
        for j in 0..k {
            let src = (t * stride + j) as isize - pad_left as isize;
            if src < 0 || src as usize >= t_in {
                continue;
            }
            let dst = t * k * cin + j * cin;
            cols[dst..dst + cin].copy_from_slice(x.row(src as usize));
        }
    }
    cols
}

fn forward(prim: &Primitive, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
    let x = inputs[0];
    let out = match prim {
        Primitive::Add => binary_forward(prim, x, inputs[1], |a, b| a + b)?,
        Primitive::Sub => binary_forward(prim, x, inputs[1], |a, b| a - b)?,
        Primitive::Mul => binary_forward(prim, x, inputs[1], |a, b| a * b)?,
        Primitive::Div => binary_forward(prim, x, inputs[1], |a, b| a / b)?,
        Primitive::Maximum => binary_forward(prim, x, inputs[1], f32::max)?,
        Primitive::Minimum => binary_forward(prim, x, inputs[1], f32::min)?,
        Primitive::MatMul => {
            let b = inputs[1];
            if x.rank() != 2 || b.rank() != 2 || x.shape()[1] != b.shape()[0] {
                return Err(Error::shape(
                    "matmul",
                    format!("{:?} x {:?}", x.shape(), b.shape()),
                ));
            }
            let (m, k, n) = (x.shape()[0], x.shape()[1], b.shape()[1]);
            let mut out = vec![0f32; m * n];
            gemm(m, k, n, x.data(), false, b.data(), false, &mut out, false);
            Tensor::from_parts(vec![m, n], out)
        }
        Primitive::Conv1d {
            stride,
            pad_left,
            pad_right,
        } => {
            let w = inputs[1];
            if x.rank() != 2 || w.rank() != 3 || x.shape()[1] != w.shape()[1] {
                return Err(Error::shape(
                    "conv1d",
                    format!("input {:?} kernel {:?}", x.shape(), w.shape()),
                ));
            }
            let (k, cin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2]);
            let t_out = conv_out_len(x.shape()[0], k, *stride, *pad_left, *pad_right);
            if t_out == 0 {
                return Err(Error::shape(
                    "conv1d",
                    format!("empty output for input {:?} kernel {k} stride {stride}", x.shape()),
                ));
            }
            let cols = im2col(x, k, *stride, *pad_left, t_out);
            let mut out = vec![0f32; t_out * cout];
            gemm(t_out, k * cin, cout, &cols, false, w.data(), false, &mut out, false);
            return Ok((Tensor::from_parts(vec![t_out, cout], out), Saved::Im2col(cols)));
        }
        Primitive::Relu => unary(x, |v| v.max(0.0)),
        Primitive::Sigmoid => unary64(x, sigmoid64),
        Primitive::Tanh => unary64(x, f64::tanh),
        Primitive::Exp => unary64(x, f64::exp),
        Primitive::Log => unary64(x, f64::ln),
        Primitive::Sqrt => unary64(x, f64::sqrt),
        Primitive::Abs => unary(x, f32::abs),
        Primitive::Pow(p) => unary64(x, |v| v.powf(f64::from(*p))),
        Primitive::Affine { scale, shift } => unary(x, |v| scale * v + shift),
        Primitive::Clamp { lo, hi } => unary(x, |v| v.clamp(*lo, *hi)),
        Primitive::Softmax { axis } => {
            check_axis(prim, x, *axis)?;
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let d = x.data();
            let mut out = vec![0f32; d.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let m = (0..len).map(|j| d[at(j)]).fold(f32::NEG_INFINITY, f32::max);
                    let e: Vec<f64> = (0..len)
                        .map(|j| (f64::from(d[at(j)]) - f64::from(m)).exp())
                        .collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..len {
                        out[at(j)] = (e[j] / z) as f32;
                    }
                }
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        }
        Primitive::Concat { axis } => {
            check_axis(prim, x, *axis)?;
            for t in &inputs[1..] {
                let ok = t.rank() == x.rank()
                    && (0..x.rank()).all(|d| d == *axis || t.shape()[d] == x.shape()[d]);
                if !ok {
                    return Err(Error::shape(
                        "concat",
                        format!("{:?} with {:?} on axis {axis}", x.shape(), t.shape()),
                    ));
                }
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = inputs.iter().map(|t| t.shape()[*axis]).sum();
            let (outer, _, inner) = axis_split(&shape, *axis);
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for t in inputs {
                    let block = t.shape()[*axis] * inner;
                    out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            Tensor::from_parts(shape, out)
        }
        Primitive::Sum { axis } | Primitive::Mean { axis } => {
            check_axis(prim, x, *axis)?;
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let scale = if matches!(prim, Primitive::Mean { .. }) {
                1.0 / len as f64
            } else {
                1.0
            };
            let d = x.data();
            let mut out = vec![0f32; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let s: f64 = (0..len)
                        .map(|j| f64::from(d[o * len * inner + j * inner + i]))
                        .sum();
                    out[o * inner + i] = (s * scale) as f32;
                }
            }
            Tensor::from_parts(keep_axis(x.shape(), *axis), out)
        }
        Primitive::SumAll => {
            let s: f64 = x.data().iter().map(|&v| f64::from(v)).sum();
            Tensor::scalar(s as f32)
        }
        Primitive::Max { axis } => {
            check_axis(prim, x, *axis)?;
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let d = x.data();
            let mut out = vec![0f32; outer * inner];
            let mut arg = vec![0usize; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = 0;
                    for j in 1..len {
                        if d[o * len * inner + j * inner + i] > d[o * len * inner + best * inner + i] {
                            best = j;
                        }
                    }
                    arg[o * inner + i] = best;
                    out[o * inner + i] = d[o * len * inner + best * inner + i];
                }
            }
            return Ok((
                Tensor::from_parts(keep_axis(x.shape(), *axis), out),
                Saved::Argmax(arg),
            ));
        }
        Primitive::Slice { axis, start, len } => {
            check_axis(prim, x, *axis)?;
            if *len == 0 || start + len > x.shape()[*axis] {
                return Err(Error::shape(
                    "slice",
                    format!("[{start}, {}) of axis {axis} in {:?}", start + len, x.shape()),
                ));
            }
            let (outer, full, inner) = axis_split(x.shape(), *axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * full * inner + start * inner;
                out.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = *len;
            Tensor::from_parts(shape, out)
        }
        Primitive::Broadcast { shape } => {
            if broadcast_shape(x.shape(), shape).as_deref() != Some(shape.as_slice()) {
                return Err(Error::shape(
                    "broadcast",
                    format!("{:?} to {:?}", x.shape(), shape),
                ));
            }
            let n: usize = shape.iter().product();
            let map = BroadcastMap::new(x.shape(), shape);
            let d = x.data();
            Tensor::from_parts(shape.clone(), (0..n).map(|i| d[map.at(i)]).collect())
        }
        Primitive::Reshape { shape } => x.clone().reshaped(shape.clone())?,
        Primitive::Transpose => {
            if x.rank() != 2 {
                return Err(Error::shape("transpose", format!("{:?}", x.shape())));
            }
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let d = x.data();
            let mut out = vec![0f32; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = d[i * c + j];
                }
            }
            Tensor::from_parts(vec![c, r], out)
        }
    };
    Ok((out, Saved::Nothing))
}

pub(crate) fn sigmoid64(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Gradient contributions for each input of one node (None where the input
/// does not require a gradient).
fn backward_node(
    prim: &Primitive,
    inputs: &[&Tensor],
    wants: &[bool],
    out: &Tensor,
    saved: &Saved,
    g: &[f32],
) -> Vec<Option<Vec<f32>>> {
    let x = inputs[0];
    let unary_grad = |f: &dyn Fn(usize) -> f32| -> Vec<Option<Vec<f32>>> {
        vec![Some((0..g.len()).map(|i| g[i] * f(i)).collect())]
    };
    match prim {
        Primitive::Add
        | Primitive::Sub
        | Primitive::Mul
        | Primitive::Div
        | Primitive::Maximum
        | Primitive::Minimum => {
            let b = inputs[1];
            let shape = out.shape();
            let ma = BroadcastMap::new(x.shape(), shape);
            let mb = BroadcastMap::new(b.shape(), shape);
            let (ad, bd) = (x.data(), b.data());
            // (d out / d a, d out / d b) at one element
            let local = |av: f32, bv: f32| -> (f32, f32) {
                match prim {
                    Primitive::Add => (1.0, 1.0),
                    Primitive::Sub => (1.0, -1.0),
                    Primitive::Mul => (bv, av),
                    Primitive::Div => (1.0 / bv, -av / (bv * bv)),
                    Primitive::Maximum => {
                        if av >= bv {
                            (1.0, 0.0)
                        } else {
                            (0.0, 1.0)
                        }
                    }
                    Primitive::Minimum => {
                        if av <= bv {
                            (1.0, 0.0)
                        } else {
                            (0.0, 1.0)
                        }
                    }
                    _ => unreachable!(),
                }
            };
            let mut ga = wants[0].then(|| vec![0f32; x.numel()]);
            let mut gb = wants[1].then(|| vec![0f32; b.numel()]);
            for (i, &gi) in g.iter().enumerate() {
                let (ia, ib) = (ma.at(i), mb.at(i));
                let (da, db) = local(ad[ia], bd[ib]);
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += gi * da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += gi * db;
                }
            }
            vec![ga, gb]
        }
        Primitive::MatMul => {
            let b = inputs[1];
            let (m, k, n) = (x.shape()[0], x.shape()[1], b.shape()[1]);
            let ga = wants[0].then(|| {
                let mut ga = vec![0f32; m * k];
                gemm(m, n, k, g, false, b.data(), true, &mut ga, false);
                ga
            });
            let gb = wants[1].then(|| {
                let mut gb = vec![0f32; k * n];
                gemm(k, m, n, x.data(), true, g, false, &mut gb, false);
                gb
            });
            vec![ga, gb]
        }
        Primitive::Conv1d {
            stride, pad_left, ..
        } => {
            let w = inputs[1];
            let Saved::Im2col(cols) = saved else {
                unreachable!("conv1d saves its im2col buffer")
            };
            let (k, cin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2]);
            let t_out = out.shape()[0];
            let t_in = x.shape()[0];
            let gx = wants[0].then(|| {
                let mut gcols = vec![0f32; t_out * k * cin];
                gemm(t_out, cout, k * cin, g, false, w.data(), true, &mut gcols, false);
                let mut gx = vec![0f32; t_in * cin];
                for t in 0..t_out {
                    for j in 0..k {
                        let src = (t * stride + j) as isize - *pad_left as isize;
                        if src < 0 || src as usize >= t_in {
                            continue;
                        }
                        let s = src as usize * cin;
                        let c0 = t * k * cin + j * cin;
                        for c in 0..cin {
                            gx[s + c] += gcols[c0 + c];
                        }
                    }
                }
                gx
            });
            let gw = wants[1].then(|| {
                let mut gw = vec![0f32; k * cin * cout];
                gemm(k * cin, t_out, cout, cols, true, g, false, &mut gw, false);
                gw
            });
            vec![gx, gw]
        }
        Primitive::Relu => unary_grad(&|i| if x.data()[i] > 0.0 { 1.0 } else { 0.0 }),
        Primitive::Sigmoid => {
            let y = out.data();
            unary_grad(&|i| y[i] * (1.0 - y[i]))
        }
        Primitive::Tanh => {
            let y = out.data();
            unary_grad(&|i| 1.0 - y[i] * y[i])
        }
        Primitive::Exp => {
            let y = out.data();
            unary_grad(&|i| y[i])
        }
        Primitive::Log => unary_grad(&|i| 1.0 / x.data()[i]),
        Primitive::Sqrt => {
            let y = out.data();
            unary_grad(&|i| if y[i] > 0.0 { 0.5 / y[i] } else { 0.0 })
        }
        Primitive::Abs => unary_grad(&|i| {
            let v = x.data()[i];
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        Primitive::Pow(p) => unary_grad(&|i| p * x.data()[i].powf(p - 1.0)),
        Primitive::Affine { scale, .. } => unary_grad(&|_| *scale),
        Primitive::Clamp { lo, hi } => unary_grad(&|i| {
            let v = x.data()[i];
            if v >= *lo && v <= *hi {
                1.0
            } else {
                0.0
            }
        }),
        Primitive::Softmax { axis } => {
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let y = out.data();
            let mut gx = vec![0f32; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let dot: f64 = (0..len).map(|j| f64::from(g[at(j)] * y[at(j)])).sum();
                    for j in 0..len {
                        gx[at(j)] = y[at(j)] * (g[at(j)] - dot as f32);
                    }
                }
            }
            vec![Some(gx)]
        }
        Primitive::Concat { axis } => {
            let (outer, _, inner) = axis_split(out.shape(), *axis);
            let total = out.shape()[*axis];
            let mut offset = 0;
            let mut grads = Vec::with_capacity(inputs.len());
            for (t, &want) in inputs.iter().zip(wants) {
                let len = t.shape()[*axis];
                if want {
                    let mut gt = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        gt.extend_from_slice(&g[base..base + len * inner]);
                    }
                    grads.push(Some(gt));
                } else {
                    grads.push(None);
                }
                offset += len;
            }
            grads
        }
        Primitive::Sum { axis } | Primitive::Mean { axis } => {
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let scale = if matches!(prim, Primitive::Mean { .. }) {
                1.0 / len as f32
            } else {
                1.0
            };
            let mut gx = vec![0f32; x.numel()];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        gx[o * len * inner + j * inner + i] = g[o * inner + i] * scale;
                    }
                }
            }
            vec![Some(gx)]
        }
        Primitive::SumAll => vec![Some(vec![g[0]; x.numel()])],
        Primitive::Max { axis } => {
            let Saved::Argmax(arg) = saved else {
                unreachable!("max saves its argmax")
            };
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let mut gx = vec![0f32; x.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    gx[o * len * inner + arg[o * inner + i] * inner + i] += g[o * inner + i];
                }
            }
            vec![Some(gx)]
        }
        Primitive::Slice { axis, start, len } => {
            let (outer, full, inner) = axis_split(x.shape(), *axis);
            let mut gx = vec![0f32; x.numel()];
            for o in 0..outer {
                let dst = o * full * inner + start * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            vec![Some(gx)]
        }
        Primitive::Broadcast { shape } => vec![Some(reduce_broadcast(g, x.shape(), shape))],
        Primitive::Reshape { .. } => vec![Some(g.to_vec())],
        Primitive::Transpose => {
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut gx = vec![0f32; r * c];
            for i in 0..r {
                for j in 0..c {
                    gx[i * c + j] = g[j * r + i];
                }
            }
            vec![Some(gx)]
        }
    }
}
