//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its inputs, so node order is already a topological order. A fresh tape is
//! built for every forward pass; [`Tape::backward`] only reads the tape and can
//! be replayed any number of times.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// `x * sigmoid(x)`
    Silu,
    Tanh,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Act(Var, Activation),
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    LogSumExp(Var, Option<usize>),
    L2Normalize(Var, usize),
    Transpose(Var),
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Gather(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Minimum row norm accepted by [`Tape::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// `shape` split around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Gradient-tracked leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (r, k, c) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = matmul_raw(ta.data(), tb.data(), r, k, c);
        let value = Tensor::matrix(r, c, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`c` vector to every row of an `[r, c]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(row));
        if ta.shape().len() != 2 || tb.shape() != [ta.shape()[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let c = ta.shape()[1];
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb.data()[i % c])
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("shape preserved");
        self.push(value, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some((index, &value)) = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .find(|(_, &x)| x.is_nan() || x <= 0.0)
        {
            return Err(Error::Domain {
                op: "log",
                index,
                value,
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        match kind {
            Activation::Silu => self.unary(a, |x| x * sigmoid(x), Op::Act(a, kind)),
            Activation::Tanh => self.unary(a, f64::tanh, Op::Act(a, kind)),
        }
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op,
                axis,
                shape: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Applies `f` to each 1-D lane along `axis` (or to all values when
    /// `axis` is `None`), producing one output per lane.
    fn reduce(
        &mut self,
        name: &'static str,
        a: Var,
        axis: Option<usize>,
        f: impl Fn(&[f64]) -> f64,
        op: Op,
    ) -> Result<Var> {
        let ta = self.value(a);
        let value = match axis {
            None => Tensor::scalar(f(ta.data())),
            Some(axis) => {
                self.check_axis(name, a, axis)?;
                let (outer, n, inner) = axis_extents(ta.shape(), axis);
                let mut out = Vec::with_capacity(outer * inner);
                let mut lane = vec![0.0; n];
                for o in 0..outer {
                    for i in 0..inner {
                        for (k, slot) in lane.iter_mut().enumerate() {
                            *slot = ta.data()[(o * n + k) * inner + i];
                        }
                        out.push(f(&lane));
                    }
                }
                let mut shape = ta.shape().to_vec();
                shape.remove(axis);
                Tensor::new(shape, out)?
            }
        };
        Ok(self.push(value, op, &[a]))
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce("sum", a, axis, |xs| xs.iter().sum(), Op::Sum(a, axis))
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(
            "mean",
            a,
            axis,
            |xs| xs.iter().sum::<f64>() / xs.len() as f64,
            Op::Mean(a, axis),
        )
    }

    /// `log(sum(exp(x)))` along `axis`, shifted by the lane maximum.
    pub fn logsumexp(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce("logsumexp", a, axis, logsumexp_raw, Op::LogSumExp(a, axis))
    }

    /// Scales every lane along `axis` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("l2_normalize", a, axis)?;
        let ta = self.value(a);
        let (outer, n, inner) = axis_extents(ta.shape(), axis);
        let mut out = ta.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let norm = (0..n).map(|k| out[idx(k)].powi(2)).sum::<f64>().sqrt();
                if norm.is_nan() || norm <= NORM_EPS {
                    return Err(Error::Domain {
                        op: "l2_normalize",
                        index: o * inner + i,
                        value: norm,
                    });
                }
                for k in 0..n {
                    out[idx(k)] /= norm;
                }
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(value, Op::L2Normalize(a, axis), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(Error::InvalidAxis {
                op: "transpose",
                axis: 1,
                shape: ta.shape().to_vec(),
            });
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let out = transpose_raw(ta.data(), r, c);
        let value = Tensor::matrix(c, r, out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyAxis { op: "concat" })?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", a, axis)?;
        let ta = self.value(a);
        let (outer, n, inner) = axis_extents(ta.shape(), axis);
        if len == 0 || start + len > n {
            return Err(Error::IndexOutOfBounds {
                op: "slice",
                index: start + len,
                len: n,
            });
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&ta.data()[from..from + len * inner]);
        }
        let mut shape = ta.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Slice { input: a, axis, start }, &[a]))
    }

    /// Picks entries by flat row-major index into a 1-D tensor.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if indices.is_empty() {
            return Err(Error::EmptyAxis { op: "gather" });
        }
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            let v = *ta.data().get(i).ok_or(Error::IndexOutOfBounds {
                op: "gather",
                index: i,
                len: ta.numel(),
            })?;
            out.push(v);
        }
        let value = Tensor::vector(out)?;
        Ok(self.push(value, Op::Gather(a, indices.to_vec()), &[a]))
    }

    /// Propagates d(loss)/d(node) back to every node reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0].value;
        if root.numel() != 1 {
            return Err(Error::NonScalarLoss(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let contributions = self.local_backward(node, &g);
            grads[id] = Some(g);
            for (var, contrib) in contributions {
                if !self.nodes[var.0].tracked {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn local_backward(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (r, k, c) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                // dA = G * B^T, dB = A^T * G
                let bt = transpose_raw(tb.data(), k, c);
                let at = transpose_raw(ta.data(), r, k);
                vec![
                    (*a, matmul_raw(g, &bt, r, c, k)),
                    (*b, matmul_raw(&at, g, k, r, c)),
                ]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(tb.data()).map(|(g, y)| g * y).collect()),
                    (*b, g.iter().zip(ta.data()).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::AddRow(a, row) => {
                let c = val(*row).numel();
                let mut drow = vec![0.0; c];
                for (i, gi) in g.iter().enumerate() {
                    drow[i % c] += gi;
                }
                vec![(*a, g.to_vec()), (*row, drow)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|x| c * x).collect())],
            Op::Neg(a) => vec![(*a, g.iter().map(|x| -x).collect())],
            Op::Exp(a) => vec![(
                *a,
                g.iter().zip(node.value.data()).map(|(g, y)| g * y).collect(),
            )],
            Op::Log(a) => vec![(
                *a,
                g.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect(),
            )],
            Op::Act(a, kind) => {
                let x = val(*a).data();
                let d: Vec<f64> = match kind {
                    Activation::Silu => x
                        .iter()
                        .zip(g)
                        .map(|(&x, g)| {
                            let s = sigmoid(x);
                            g * s * (1.0 + x * (1.0 - s))
                        })
                        .collect(),
                    Activation::Tanh => node
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(y, g)| g * (1.0 - y * y))
                        .collect(),
                };
                vec![(*a, d)]
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) | Op::LogSumExp(a, axis) => {
                let input = val(*a);
                let (outer, n, inner) = match axis {
                    None => (1, input.numel(), 1),
                    Some(axis) => axis_extents(input.shape(), *axis),
                };
                let mut d = vec![0.0; input.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let go = g[o * inner + i];
                        let y = node.value.data()[o * inner + i];
                        for k in 0..n {
                            let idx = (o * n + k) * inner + i;
                            d[idx] = match &node.op {
                                Op::Sum(..) => go,
                                Op::Mean(..) => go / n as f64,
                                _ => go * (input.data()[idx] - y).exp(),
                            };
                        }
                    }
                }
                vec![(*a, d)]
            }
            Op::L2Normalize(a, axis) => {
                let input = val(*a);
                let y = node.value.data();
                let (outer, n, inner) = axis_extents(input.shape(), *axis);
                let mut d = vec![0.0; input.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let norm = (0..n)
                            .map(|k| input.data()[idx(k)].powi(2))
                            .sum::<f64>()
                            .sqrt();
                        let yg: f64 = (0..n).map(|k| y[idx(k)] * g[idx(k)]).sum();
                        for k in 0..n {
                            d[idx(k)] = (g[idx(k)] - y[idx(k)] * yg) / norm;
                        }
                    }
                }
                vec![(*a, d)]
            }
            Op::Transpose(a) => {
                let s = val(*a).shape();
                // output is [c, r]
                vec![(*a, transpose_raw(g, s[1], s[0]))]
            }
            Op::Concat(parts, axis) => {
                let base = node.value.shape();
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[axis + 1..].iter().product();
                let row = base[*axis] * inner;
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let chunk = val(p).shape()[*axis] * inner;
                    let mut d = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let from = o * row + offset;
                        d.extend_from_slice(&g[from..from + chunk]);
                    }
                    offset += chunk;
                    out.push((p, d));
                }
                out
            }
            Op::Slice { input, axis, start } => {
                let t = val(*input);
                let (outer, n, inner) = axis_extents(t.shape(), *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![0.0; t.numel()];
                for o in 0..outer {
                    let from = (o * n + start) * inner;
                    let src = o * len * inner;
                    d[from..from + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![(*input, d)]
            }
            Op::Gather(a, indices) => {
                let mut d = vec![0.0; val(*a).numel()];
                for (&i, gi) in indices.iter().zip(g) {
                    d[i] += gi;
                }
                vec![(*a, d)]
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, shaped like `v`'s value.
    /// Nodes that do not influence the loss get zeros.
    pub fn get(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.shape(v).to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches value shape"),
            None => Tensor::zeros(shape),
        }
    }
}

pub(crate) fn logsumexp_raw(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn matmul_raw(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let x = a[i * k + p];
            let brow = &b[p * c..(p + 1) * c];
            for (o, y) in row.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
