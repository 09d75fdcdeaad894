//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor created during one forward pass. Tensors are
//! referred to by lightweight [`Var`] handles. Ops append nodes in topological
//! order; [`Tape::backward`] replays the tape in reverse and accumulates exact
//! vector-Jacobian products into per-node gradient buffers.
//!
//! Tensors are immutable once created. A tape is single-owner: one training
//! step builds and consumes it on one logical thread. Calling `backward` twice
//! without clearing accumulates gradients (documented contract).

use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, NumCast};
use thiserror::Error;

/// Element dtype tag, used by checkpoint serialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    /// Raw bytes; used for non-tensor checkpoint records.
    U8,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::U8 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            2 => Some(Dtype::U8),
            _ => None,
        }
    }

    /// Element size in bytes.
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

/// Scalar element type of a tensor. Precision is a construction-time choice:
/// training defaults to `f32`, gradient tests run at `f64`.
pub trait Scalar:
    Float + NumCast + AddAssign + SubAssign + MulAssign + Sum + Debug + Display + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn from_f64(x: f64) -> Self {
        NumCast::from(x).unwrap()
    }

    fn to_f64(self) -> f64 {
        NumCast::from(self).unwrap()
    }

    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8>;
    fn from_le_bytes_vec(bytes: &[u8]) -> Option<Vec<Self>>;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_bytes_vec(bytes: &[u8]) -> Option<Vec<Self>> {
        if bytes.len() % 4 != 0 {
            return None;
        }
        Some(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_bytes_vec(bytes: &[u8]) -> Option<Vec<Self>> {
        if bytes.len() % 8 != 0 {
            return None;
        }
        Some(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: invalid axis {axis} for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
}

/// Handle to a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    /// Elementwise binary op; `broadcast` set when rhs shape is a suffix of
    /// lhs shape (rhs broadcast over leading dims).
    Add(usize, usize, bool),
    Sub(usize, usize, bool),
    Mul(usize, usize, bool),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Concat {
        inputs: Vec<usize>,
        widths: Vec<usize>,
        rows: usize,
    },
    GatherRows {
        input: usize,
        idx: Vec<usize>,
        width: usize,
    },
    ReduceMax {
        input: usize,
        argmax: Vec<usize>,
    },
    ReduceSum(usize),
    ReduceMean(usize),
    LeakyRelu {
        input: usize,
        slope: f64,
    },
    Abs(usize),
    Sqrt(usize),
    Sin(usize),
    Cos(usize),
    Square(usize),
    MulScalar {
        input: usize,
        c: f64,
    },
    AddScalar(usize),
    Neg(usize),
    Reshape(usize),
    BroadcastRow {
        input: usize,
        n: usize,
    },
}

struct Node<E> {
    shape: Vec<usize>,
    values: Vec<E>,
    requires_grad: bool,
    grad: Option<Vec<E>>,
    op: Op,
}

/// Ordered record of primitive ops; an op's inputs always precede it.
pub struct Tape<E: Scalar> {
    nodes: RefCell<Vec<Node<E>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, shape: Vec<usize>, values: Vec<E>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), values.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            values,
            requires_grad,
            grad: None,
            op,
        });
        Var(nodes.len() - 1)
    }

    pub fn leaf(&self, shape: &[usize], values: Vec<E>, requires_grad: bool) -> Var {
        assert_eq!(
            numel(shape),
            values.len(),
            "leaf: shape {:?} does not match value count {}",
            shape,
            values.len()
        );
        self.push(shape.to_vec(), values, requires_grad, Op::Leaf)
    }

    pub fn constant(&self, shape: &[usize], values: Vec<E>) -> Var {
        self.leaf(shape, values, false)
    }

    pub fn scalar(&self, value: E) -> Var {
        self.push(vec![], vec![value], false, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn values(&self, v: Var) -> Vec<E> {
        self.nodes.borrow()[v.0].values.clone()
    }

    pub fn value_scalar(&self, v: Var) -> E {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[v.0].values.len(), 1);
        nodes[v.0].values[0]
    }

    /// Gradient of the last `backward` call w.r.t. `v`; zeros when `v` was
    /// not reached.
    pub fn grad(&self, v: Var) -> Vec<E> {
        let nodes = self.nodes.borrow();
        match &nodes[v.0].grad {
            Some(g) => g.clone(),
            None => vec![E::zero(); nodes[v.0].values.len()],
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn binary_shapes(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(Vec<usize>, bool), TensorError> {
        let nodes = self.nodes.borrow();
        let sa = &nodes[a.0].shape;
        let sb = &nodes[b.0].shape;
        if sa == sb {
            return Ok((sa.clone(), false));
        }
        // rhs broadcast over leading dims: sb must be a strict suffix of sa.
        if sb.len() < sa.len() && sa[sa.len() - sb.len()..] == sb[..] {
            return Ok((sa.clone(), true));
        }
        Err(TensorError::ShapeMismatch {
            op,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })
    }

    fn binary(
        &self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(E, E) -> E,
        make: impl Fn(usize, usize, bool) -> Op,
    ) -> Result<Var, TensorError> {
        let (shape, broadcast) = self.binary_shapes(op_name, a, b)?;
        let (values, rg) = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.0].values;
            let vb = &nodes[b.0].values;
            let values: Vec<E> = if broadcast {
                va.iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, vb[i % vb.len()]))
                    .collect()
            } else {
                va.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)).collect()
            };
            (values, nodes[a.0].requires_grad || nodes[b.0].requires_grad)
        };
        Ok(self.push(shape, values, rg, make(a.0, b.0, broadcast)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, |a, b, br| Op::Add(a, b, br))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, |a, b, br| Op::Sub(a, b, br))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, |a, b, br| Op::Mul(a, b, br))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k, n, values, rg) = {
            let nodes = self.nodes.borrow();
            let sa = &nodes[a.0].shape;
            let sb = &nodes[b.0].shape;
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: sa.clone(),
                    rhs: sb.clone(),
                });
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let values = kernels::matmul_nn(&nodes[a.0].values, &nodes[b.0].values, m, k, n);
            (
                m,
                k,
                n,
                values,
                nodes[a.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        Ok(self.push(
            vec![m, n],
            values,
            rg,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
        ))
    }

    /// Concatenate rank-2 tensors along the last dimension.
    pub fn concat(&self, parts: &[Var]) -> Result<Var, TensorError> {
        assert!(!parts.is_empty());
        let (rows, widths, values, rg) = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].shape[0];
            let mut widths = Vec::with_capacity(parts.len());
            let mut rg = false;
            for &p in parts {
                let s = &nodes[p.0].shape;
                if s.len() != 2 || s[0] != rows {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: nodes[parts[0].0].shape.clone(),
                        rhs: s.clone(),
                    });
                }
                widths.push(s[1]);
                rg |= nodes[p.0].requires_grad;
            }
            let total: usize = widths.iter().sum();
            let mut values = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (&p, &w) in parts.iter().zip(widths.iter()) {
                    let v = &nodes[p.0].values;
                    values.extend_from_slice(&v[r * w..(r + 1) * w]);
                }
            }
            (rows, widths, values, rg)
        };
        let total: usize = widths.iter().sum();
        Ok(self.push(
            vec![rows, total],
            values,
            rg,
            Op::Concat {
                inputs: parts.iter().map(|p| p.0).collect(),
                widths,
                rows,
            },
        ))
    }

    /// Gather rows of a rank-2 tensor: `out[m] = input[idx[m]]`.
    pub fn gather_rows(&self, input: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (width, values, rg) = {
            let nodes = self.nodes.borrow();
            let s = &nodes[input.0].shape;
            if s.len() != 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "gather_rows",
                    lhs: s.clone(),
                    rhs: vec![],
                });
            }
            let (rows, width) = (s[0], s[1]);
            for &i in idx {
                if i >= rows {
                    return Err(TensorError::IndexOutOfRange {
                        op: "gather_rows",
                        index: i,
                        len: rows,
                    });
                }
            }
            let v = &nodes[input.0].values;
            let mut values = Vec::with_capacity(idx.len() * width);
            for &i in idx {
                values.extend_from_slice(&v[i * width..(i + 1) * width]);
            }
            (width, values, nodes[input.0].requires_grad)
        };
        Ok(self.push(
            vec![idx.len(), width],
            values,
            rg,
            Op::GatherRows {
                input: input.0,
                idx: idx.to_vec(),
                width,
            },
        ))
    }

    /// Max-reduce along `axis`; ties routed to the lowest index. Returns the
    /// reduced tensor; argmax indices are recorded for the backward pass.
    pub fn reduce_max(&self, input: Var, axis: usize) -> Result<Var, TensorError> {
        let (out_shape, values, argmax, rg) = {
            let nodes = self.nodes.borrow();
            let shape = &nodes[input.0].shape;
            if axis >= shape.len() {
                return Err(TensorError::InvalidAxis {
                    op: "reduce_max",
                    axis,
                    shape: shape.clone(),
                });
            }
            let outer: usize = shape[..axis].iter().product();
            let dim = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let v = &nodes[input.0].values;
            let mut values = Vec::with_capacity(outer * inner);
            let mut argmax = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = v[o * dim * inner + i];
                    let mut best_j = 0usize;
                    for j in 1..dim {
                        let x = v[(o * dim + j) * inner + i];
                        if x > best {
                            best = x;
                            best_j = j;
                        }
                    }
                    values.push(best);
                    argmax.push(o * dim * inner + best_j * inner + i);
                }
            }
            let mut out_shape = shape.clone();
            out_shape.remove(axis);
            (out_shape, values, argmax, nodes[input.0].requires_grad)
        };
        Ok(self.push(
            out_shape,
            values,
            rg,
            Op::ReduceMax {
                input: input.0,
                argmax,
            },
        ))
    }

    pub fn reduce_sum(&self, input: Var) -> Var {
        let (sum, rg) = {
            let nodes = self.nodes.borrow();
            let s: E = nodes[input.0].values.iter().copied().sum();
            (s, nodes[input.0].requires_grad)
        };
        self.push(vec![], vec![sum], rg, Op::ReduceSum(input.0))
    }

    pub fn reduce_mean(&self, input: Var) -> Var {
        let (mean, rg) = {
            let nodes = self.nodes.borrow();
            let n = nodes[input.0].values.len();
            let s: E = nodes[input.0].values.iter().copied().sum();
            (s / E::from_f64(n as f64), nodes[input.0].requires_grad)
        };
        self.push(vec![], vec![mean], rg, Op::ReduceMean(input.0))
    }

    fn unary(&self, input: Var, f: impl Fn(E) -> E, make: impl Fn(usize) -> Op) -> Var {
        let (shape, values, rg) = {
            let nodes = self.nodes.borrow();
            let values = nodes[input.0].values.iter().map(|&x| f(x)).collect();
            (
                nodes[input.0].shape.clone(),
                values,
                nodes[input.0].requires_grad,
            )
        };
        self.push(shape, values, rg, make(input.0))
    }

    pub fn leaky_relu(&self, input: Var, slope: f64) -> Var {
        let s = E::from_f64(slope);
        self.unary(
            input,
            |x| if x >= E::zero() { x } else { s * x },
            |i| Op::LeakyRelu { input: i, slope },
        )
    }

    /// Subgradient convention: sign(0) = 0.
    pub fn abs(&self, input: Var) -> Var {
        self.unary(input, |x| x.abs(), Op::Abs)
    }

    pub fn sqrt(&self, input: Var) -> Var {
        self.unary(input, |x| x.sqrt(), Op::Sqrt)
    }

    pub fn sin(&self, input: Var) -> Var {
        self.unary(input, |x| x.sin(), Op::Sin)
    }

    pub fn cos(&self, input: Var) -> Var {
        self.unary(input, |x| x.cos(), Op::Cos)
    }

    pub fn square(&self, input: Var) -> Var {
        self.unary(input, |x| x * x, Op::Square)
    }

    pub fn mul_scalar(&self, input: Var, c: f64) -> Var {
        let cc = E::from_f64(c);
        self.unary(input, |x| x * cc, |i| Op::MulScalar { input: i, c })
    }

    pub fn add_scalar(&self, input: Var, c: f64) -> Var {
        let cc = E::from_f64(c);
        self.unary(input, |x| x + cc, Op::AddScalar)
    }

    pub fn neg(&self, input: Var) -> Var {
        self.unary(input, |x| -x, Op::Neg)
    }

    /// Reinterpret shape without moving data.
    pub fn reshape(&self, input: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let (values, rg) = {
            let nodes = self.nodes.borrow();
            if numel(shape) != nodes[input.0].values.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "reshape",
                    lhs: nodes[input.0].shape.clone(),
                    rhs: shape.to_vec(),
                });
            }
            (nodes[input.0].values.clone(), nodes[input.0].requires_grad)
        };
        Ok(self.push(shape.to_vec(), values, rg, Op::Reshape(input.0)))
    }

    /// Broadcast a rank-1 tensor `[D]` to `[n, D]` rows.
    pub fn broadcast_row(&self, input: Var, n: usize) -> Result<Var, TensorError> {
        let (d, values, rg) = {
            let nodes = self.nodes.borrow();
            let s = &nodes[input.0].shape;
            if s.len() != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast_row",
                    lhs: s.clone(),
                    rhs: vec![n],
                });
            }
            let d = s[0];
            let mut values = Vec::with_capacity(n * d);
            for _ in 0..n {
                values.extend_from_slice(&nodes[input.0].values);
            }
            (d, values, nodes[input.0].requires_grad)
        };
        Ok(self.push(
            vec![n, d],
            values,
            rg,
            Op::BroadcastRow { input: input.0, n },
        ))
    }

    /// Propagate gradients from a scalar loss backward through the tape.
    pub fn backward(&self, loss: Var) -> Result<(), TensorError> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.0].values.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: nodes[loss.0].shape.clone(),
            });
        }
        // Working buffers for this call; merged into persistent node grads at
        // the end so repeated backward calls accumulate leaf gradients only.
        let mut work: Vec<Option<Vec<E>>> = (0..nodes.len()).map(|_| None).collect();
        accumulate(&nodes, &mut work, loss.0, &[E::one()]);
        for id in (0..=loss.0).rev() {
            if !nodes[id].requires_grad || work[id].is_none() {
                continue;
            }
            let out_grad = work[id].as_ref().unwrap().clone();
            match &nodes[id].op {
                Op::Leaf => {}
                &Op::Add(a, b, broadcast) => {
                    accumulate(&nodes, &mut work, a, &out_grad);
                    accumulate_reduced(&nodes, &mut work, b, &out_grad, broadcast, E::one());
                }
                &Op::Sub(a, b, broadcast) => {
                    accumulate(&nodes, &mut work, a, &out_grad);
                    accumulate_reduced(&nodes, &mut work, b, &out_grad, broadcast, -E::one());
                }
                &Op::Mul(a, b, broadcast) => {
                    let ga: Vec<E> = if broadcast {
                        let vb = &nodes[b].values;
                        out_grad
                            .iter()
                            .enumerate()
                            .map(|(i, &g)| g * vb[i % vb.len()])
                            .collect()
                    } else {
                        out_grad
                            .iter()
                            .zip(nodes[b].values.iter())
                            .map(|(&g, &y)| g * y)
                            .collect()
                    };
                    let gb_full: Vec<E> = out_grad
                        .iter()
                        .zip(nodes[a].values.iter())
                        .map(|(&g, &x)| g * x)
                        .collect();
                    accumulate(&nodes, &mut work, a, &ga);
                    accumulate_reduced(&nodes, &mut work, b, &gb_full, broadcast, E::one());
                }
                &Op::MatMul { a, b, m, k, n } => {
                    let ga = kernels::matmul_nt(&out_grad, &nodes[b].values, m, n, k);
                    let gb = kernels::matmul_tn(&nodes[a].values, &out_grad, m, k, n);
                    accumulate(&nodes, &mut work, a, &ga);
                    accumulate(&nodes, &mut work, b, &gb);
                }
                Op::Concat {
                    inputs,
                    widths,
                    rows,
                } => {
                    let inputs = inputs.clone();
                    let widths = widths.clone();
                    let rows = *rows;
                    let total: usize = widths.iter().sum();
                    let mut offset = 0usize;
                    for (input, &w) in inputs.iter().zip(widths.iter()) {
                        let mut g = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            let base = r * total + offset;
                            g.extend_from_slice(&out_grad[base..base + w]);
                        }
                        accumulate(&nodes, &mut work, *input, &g);
                        offset += w;
                    }
                }
                Op::GatherRows { input, idx, width } => {
                    let input = *input;
                    let width = *width;
                    let idx = idx.clone();
                    let mut g = vec![E::zero(); nodes[input].values.len()];
                    for (m, &i) in idx.iter().enumerate() {
                        for c in 0..width {
                            g[i * width + c] += out_grad[m * width + c];
                        }
                    }
                    accumulate(&nodes, &mut work, input, &g);
                }
                Op::ReduceMax { input, argmax } => {
                    let input = *input;
                    let argmax = argmax.clone();
                    let mut g = vec![E::zero(); nodes[input].values.len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        g[src] += out_grad[o];
                    }
                    accumulate(&nodes, &mut work, input, &g);
                }
                &Op::ReduceSum(input) => {
                    let g = vec![out_grad[0]; nodes[input].values.len()];
                    accumulate(&nodes, &mut work, input, &g);
                }
                &Op::ReduceMean(input) => {
                    let n = nodes[input].values.len();
                    let g = vec![out_grad[0] / E::from_f64(n as f64); n];
                    accumulate(&nodes, &mut work, input, &g);
                }
                &Op::LeakyRelu { input, slope } => {
                    let s = E::from_f64(slope);
                    let g: Vec<E> = nodes[input]
                        .values
                        .iter()
                        .zip(out_grad.iter())
                        .map(|(&x, &og)| if x >= E::zero() { og } else { og * s })
                        .collect();
                    accumulate(&nodes, &mut work, input, &g);
                }
                &Op::Abs(input) => {
                    let g: Vec<E> = nodes[input]
                        .values
                        .iter()
                        .zip(out_grad.iter())
                        .map(|(&x, &og)| {
                            if x > E::zero() {
                                og
                            } else if x < E::zero() {
                                -og
                            } else {
                                E::zero()
                            }
                        })
                        .collect();
                    accumulate(&nodes, &mut work, input, &g);
                }
                &Op::Sqrt(input) => {
                    let half = E::from_f64(0.5);
                    let g: Vec<E> = nodes[id]
                        .values
                        .iter()
                        .zip(out_grad.iter())
                        .map(|(&y, &og)| og * half / y)
                        .collect();
                    accumulate(&nodes, &mut work, input, &g);
                }
                &Op::Sin(input) => {
                    let g: Vec<E> = nodes[input]
                        .values
                        .iter()
                        .zip(out_grad.iter())
                        .map(|(&x, &og)| og * x.cos())
                        .collect();
                    accumulate(&nodes, &mut work, input, &g);
                }
                &Op::Cos(input) => {
                    let g: Vec<E> = nodes[input]
                        .values
                        .iter()
                        .zip(out_grad.iter())
                        .map(|(&x, &og)| -og * x.sin())
                        .collect();
                    accumulate(&nodes, &mut work, input, &g);
                }
                &Op::Square(input) => {
                    let two = E::from_f64(2.0);
                    let g: Vec<E> = nodes[input]
                        .values
                        .iter()
                        .zip(out_grad.iter())
                        .map(|(&x, &og)| og * two * x)
                        .collect();
                    accumulate(&nodes, &mut work, input, &g);
                }
                &Op::MulScalar { input, c } => {
                    let cc = E::from_f64(c);
                    let g: Vec<E> = out_grad.iter().map(|&og| og * cc).collect();
                    accumulate(&nodes, &mut work, input, &g);
                }
                &Op::AddScalar(input) => {
                    accumulate(&nodes, &mut work, input, &out_grad);
                }
                &Op::Neg(input) => {
                    let g: Vec<E> = out_grad.iter().map(|&og| -og).collect();
                    accumulate(&nodes, &mut work, input, &g);
                }
                &Op::Reshape(input) => {
                    accumulate(&nodes, &mut work, input, &out_grad);
                }
                &Op::BroadcastRow { input, n } => {
                    let d = nodes[input].values.len();
                    let mut g = vec![E::zero(); d];
                    for r in 0..n {
                        for c in 0..d {
                            g[c] += out_grad[r * d + c];
                        }
                    }
                    accumulate(&nodes, &mut work, input, &g);
                }
            }
        }
        for (node, w) in nodes.iter_mut().zip(work.into_iter()) {
            if let Some(w) = w {
                match &mut node.grad {
                    Some(g) => {
                        for (gi, d) in g.iter_mut().zip(w.into_iter()) {
                            *gi += d;
                        }
                    }
                    None => node.grad = Some(w),
                }
            }
        }
        Ok(())
    }
}

fn accumulate<E: Scalar>(nodes: &[Node<E>], work: &mut [Option<Vec<E>>], id: usize, grad: &[E]) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut work[id] {
        Some(g) => {
            for (gi, &d) in g.iter_mut().zip(grad.iter()) {
                *gi += d;
            }
        }
        None => work[id] = Some(grad.to_vec()),
    }
}

/// Accumulate into `id`, summing over leading dims when `broadcast` is set.
fn accumulate_reduced<E: Scalar>(
    nodes: &[Node<E>],
    work: &mut [Option<Vec<E>>],
    id: usize,
    full_grad: &[E],
    broadcast: bool,
    sign: E,
) {
    if !nodes[id].requires_grad {
        return;
    }
    if !broadcast {
        if sign == E::one() {
            accumulate(nodes, work, id, full_grad);
        } else {
            let g: Vec<E> = full_grad.iter().map(|&x| x * sign).collect();
            accumulate(nodes, work, id, &g);
        }
        return;
    }
    let d = nodes[id].values.len();
    let mut g = vec![E::zero(); d];
    for (i, &x) in full_grad.iter().enumerate() {
        g[i % d] += x * sign;
    }
    accumulate(nodes, work, id, &g);
}

pub mod kernels {
    //! Dense matmul kernels shared by forward and backward passes. Rows are
    //! split across threads; each output element is reduced sequentially, so
    //! results are bitwise deterministic regardless of thread count.

    use super::Scalar;
    use rayon::prelude::*;

    const PAR_THRESHOLD: usize = 1 << 16;

    /// Dispatching through the thread pool costs two futex round trips per
    /// call, pure loss when only one worker exists.
    pub(crate) fn par_enabled() -> bool {
        rayon::current_num_threads() > 1
    }

    /// C[m,n] = A[m,k] * B[k,n]
    pub fn matmul_nn<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
        let mut c = vec![E::zero(); m * n];
        let row = |ci: &mut [E], i: usize| {
            for l in 0..k {
                let av = a[i * k + l];
                let brow = &b[l * n..(l + 1) * n];
                for (cj, &bv) in ci.iter_mut().zip(brow.iter()) {
                    *cj += av * bv;
                }
            }
        };
        if m * k * n >= PAR_THRESHOLD && par_enabled() {
            c.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, ci)| row(ci, i));
        } else {
            for (i, ci) in c.chunks_mut(n).enumerate() {
                row(ci, i);
            }
        }
        c
    }

    /// C[m,k] = A[m,n] * B[k,n]^T
    pub fn matmul_nt<E: Scalar>(a: &[E], b: &[E], m: usize, n: usize, k: usize) -> Vec<E> {
        let row = |ci: &mut [E], i: usize| {
            let arow = &a[i * n..(i + 1) * n];
            for (l, cl) in ci.iter_mut().enumerate() {
                let brow = &b[l * n..(l + 1) * n];
                let mut acc = E::zero();
                for (&av, &bv) in arow.iter().zip(brow.iter()) {
                    acc += av * bv;
                }
                *cl = acc;
            }
        };
        let mut c = vec![E::zero(); m * k];
        if m * n * k >= PAR_THRESHOLD && par_enabled() {
            c.par_chunks_mut(k)
                .enumerate()
                .for_each(|(i, ci)| row(ci, i));
        } else {
            for (i, ci) in c.chunks_mut(k).enumerate() {
                row(ci, i);
            }
        }
        c
    }

    /// C[k,n] = A[m,k]^T * B[m,n]
    pub fn matmul_tn<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
        let mut c = vec![E::zero(); k * n];
        let row = |cl: &mut [E], l: usize| {
            for i in 0..m {
                let av = a[i * k + l];
                let brow = &b[i * n..(i + 1) * n];
                for (cj, &bv) in cl.iter_mut().zip(brow.iter()) {
                    *cj += av * bv;
                }
            }
        };
        if m * k * n >= PAR_THRESHOLD && par_enabled() {
            c.par_chunks_mut(n)
                .enumerate()
                .for_each(|(l, cl)| row(cl, l));
        } else {
            for (l, cl) in c.chunks_mut(n).enumerate() {
                row(cl, l);
            }
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn leaky_relu_forward() {
        let t = tape();
        let x = t.constant(&[2], vec![-1.0, 3.0]);
        let y = t.leaky_relu(x, 0.2);
        assert_eq!(t.values(y), vec![-0.2, 3.0]);
    }

    #[test]
    fn matmul_identity() {
        let t = tape();
        let eye = t.constant(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let b = t.constant(&[3, 2], vec![1., 2., 3., 4., 5., 6.]);
        let c = t.matmul(eye, b).unwrap();
        assert_eq!(t.values(c), t.values(b));
    }

    #[test]
    fn reduce_max_tie_to_lowest_index() {
        let t = tape();
        let x = t.leaf(&[3], vec![3.0, 7.0, 7.0], true);
        let m = t.reduce_max(x, 0).unwrap();
        assert_eq!(t.values(m), vec![7.0]);
        t.backward(m).unwrap();
        assert_eq!(t.grad(x), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let t = tape();
        let x = t.leaf(&[3], vec![1.0, 2.0, 3.0], true);
        let sq = t.square(x);
        let loss = t.reduce_sum(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn l1_subgradient_zero_at_equality() {
        let t = tape();
        let x = t.leaf(&[2], vec![1.0, 2.0], true);
        let y = t.constant(&[2], vec![1.0, 2.0]);
        let d = t.sub(x, y).unwrap();
        let loss = t.reduce_sum(t.abs(d));
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x), vec![0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let t = tape();
        let a = t.constant(&[2, 3], vec![0.0; 6]);
        let b = t.constant(&[2, 2], vec![0.0; 4]);
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn gather_index_out_of_range() {
        let t = tape();
        let a = t.constant(&[2, 3], vec![0.0; 6]);
        let err = t.gather_rows(a, &[0, 5]).unwrap_err();
        assert!(err.to_string().contains("5"));
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let t = tape();
        let a = t.leaf(&[2], vec![1.0, 2.0], true);
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn backward_twice_accumulates() {
        let t = tape();
        let x = t.leaf(&[1], vec![3.0], true);
        let loss = t.reduce_sum(t.square(x));
        t.backward(loss).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x), vec![12.0]);
    }

    #[test]
    fn broadcast_add_matches_tiling() {
        let t = tape();
        let a = t.leaf(&[2, 3], vec![1., 2., 3., 4., 5., 6.], true);
        let b = t.leaf(&[3], vec![10., 20., 30.], true);
        let c = t.add(a, b).unwrap();
        assert_eq!(t.values(c), vec![11., 22., 33., 14., 25., 36.]);
        let loss = t.reduce_sum(c);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(b), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn gather_scatter_conserves_gradient_mass() {
        let t = tape();
        let x = t.leaf(&[4, 2], vec![1., 2., 3., 4., 5., 6., 7., 8.], true);
        let g = t.gather_rows(x, &[0, 0, 2, 3, 3, 3]).unwrap();
        let loss = t.reduce_sum(g);
        t.backward(loss).unwrap();
        let gx = t.grad(x);
        let total: f64 = gx.iter().sum();
        assert_eq!(total, 12.0); // 6 gathered rows x 2 cols x grad 1
    }
}
