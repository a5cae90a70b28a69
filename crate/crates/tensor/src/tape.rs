//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation evaluates eagerly and records enough of its inputs to
//! replay the chain rule in [`Tape::backward`]. Nodes that do not depend on
//! a gradient-carrying leaf are skipped during the backward sweep.

use std::borrow::Cow;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<R> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Log(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<R>,
        rstd: Vec<R>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        start: usize,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    Gelu(Var),
    Tanh(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<R>,
    },
}

#[derive(Debug)]
struct Node<'a, R: Clone> {
    value: Cow<'a, [R]>,
    shape: Vec<usize>,
    op: Op<R>,
    needs_grad: bool,
}

/// Linear record of evaluated operations. Leaves may borrow their data
/// for the lifetime `'a` of the tape.
#[derive(Debug, Default)]
pub struct Tape<'a, R: Real = f32> {
    nodes: Vec<Node<'a, R>>,
}

/// Gradients of one scalar with respect to every recorded node.
#[derive(Debug)]
pub struct Gradients<R: Real = f32> {
    grads: Vec<Option<Vec<R>>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient for `var`, or `None` when it received no contribution.
    pub fn get(&self, var: Var) -> Option<&[R]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<R>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_parts<R: Real>(x: R) -> (R, R) {
    // tanh approximation; returns (value, derivative)
    let c = R::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = R::lit(0.044715);
    let half = R::lit(0.5);
    let one = R::one();
    let x3 = x * x * x;
    let u = c * (x + a * x3);
    let t = u.tanh();
    let value = half * x * (one + t);
    let du = c * (one + R::lit(3.0) * a * x * x);
    let deriv = half * (one + t) + half * x * (one - t * t) * du;
    (value, deriv)
}

/// `out[m×n] += a[m×k] · b[k×n]`, all row-major.
fn gemm_acc<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    R::gemm_acc(m, k, n, (a, k as isize, 1), (b, n as isize, 1), out);
}

fn transpose2<R: Real>(x: &[R], rows: usize, cols: usize) -> Vec<R> {
    let mut out = vec![R::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn add_into<R: Real>(dst: &mut [R], src: &[R]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

fn grad_slot<'g, R: Real>(
    nodes: &[Node<'_, R>],
    grads: &'g mut [Option<Vec<R>>],
    v: Var,
) -> Option<&'g mut Vec<R>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![R::zero(); len]))
}

impl<'a, R: Real> Tape<'a, R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[R] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copies the value of `v` out into a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor<R> {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.to_vec()).expect("node shape is consistent")
    }

    fn push(&mut self, value: Vec<R>, shape: Vec<usize>, op: Op<R>, needs_grad: bool) -> Var {
        self.push_cow(Cow::Owned(value), shape, op, needs_grad)
    }

    fn push_cow(&mut self, value: Cow<'a, [R]>, shape: Vec<usize>, op: Op<R>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a tensor as a leaf without copying its data. Gradients flow
    /// to it iff it requires grad.
    pub fn leaf(&mut self, t: &'a Tensor<R>) -> Var {
        self.push_cow(Cow::Borrowed(t.data()), t.shape().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records an owned tensor as a leaf.
    pub fn leaf_owned(&mut self, t: Tensor<R>) -> Var {
        let needs = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(t.into_data(), shape, Op::Leaf, needs)
    }

    /// Records borrowed data as a constant.
    pub fn borrowed(&mut self, shape: Vec<usize>, data: &'a [R]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape {
                op: "constant",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(self.push_cow(Cow::Borrowed(data), shape, Op::Leaf, false))
    }

    /// Records a constant that never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<R>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape {
                op: "constant",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(data, shape, Op::Leaf, false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![R::zero(); m * n];
        gemm_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, vec![m, n], Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(TensorError::Shape {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose2(self.value(x), r, c);
        let needs = self.needs(x);
        Ok(self.push(out, vec![c, r], Op::Transpose(x), needs))
    }

    /// Element-wise sum. A 1-d right operand matching the trailing
    /// dimension is broadcast over the leading rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b));
        let needs = self.needs(a) || self.needs(b);
        if sa == sb {
            let out = self
                .value(a)
                .iter()
                .zip(self.value(b))
                .map(|(x, y)| *x + *y)
                .collect();
            return Ok(self.push(out, sa, Op::Add(a, b), needs));
        }
        if sb.len() == 1 && !sa.is_empty() && sa[sa.len() - 1] == sb[0] {
            let n = sb[0];
            let bv = self.value(b);
            let out = self
                .value(a)
                .iter()
                .enumerate()
                .map(|(i, x)| *x + bv[i % n])
                .collect();
            return Ok(self.push(out, sa, Op::AddRow(a, b), needs));
        }
        Err(TensorError::Shape {
            op: "add",
            lhs: sa,
            rhs: sb.to_vec(),
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b));
        if sa != sb {
            return Err(TensorError::Shape {
                op: "mul",
                lhs: sa,
                rhs: sb.to_vec(),
            });
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x * *y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, sa, Op::Mul(a, b), needs))
    }

    /// Multiplication by a constant scalar.
    pub fn scale(&mut self, x: Var, c: R) -> Var {
        let out = self.value(x).iter().map(|v| *v * c).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(out, shape, Op::Scale(x, c), needs)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Index {
                op: "softmax",
                index: axis,
                size: shape.len(),
            });
        }
        let xv = self.value(x);
        if xv.iter().any(|v| v.is_nan()) {
            return Err(TensorError::Numeric { op: "softmax" });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = vec![R::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut max = R::neg_infinity();
                for j in 0..len {
                    max = max.max(xv[at(j)]);
                }
                let mut total = R::zero();
                for j in 0..len {
                    let e = (xv[at(j)] - max).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            out,
            shape,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            needs,
        ))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.iter().any(|v| v.is_nan() || *v < R::zero()) {
            return Err(TensorError::Numeric { op: "log" });
        }
        let out = xv.iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(out, shape, Op::Log(x), needs))
    }

    /// Layer normalization over the trailing dimension with affine
    /// parameters `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&0);
        if n == 0 || self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let rows = xv.len() / n;
        let inv_n = R::lit(1.0 / n as f64);
        let eps = R::lit(LAYER_NORM_EPS);
        let mut out = vec![R::zero(); xv.len()];
        let mut xhat = vec![R::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<R>() * inv_n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<R>() * inv_n;
            let rs = R::one() / (var + eps).sqrt();
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j] + bv[j];
            }
            rstd.push(rs);
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Row lookup into a `[rows × width]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(TensorError::Shape {
                op: "embedding",
                lhs: s.to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (rows, width) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index {
                op: "embedding",
                index: bad,
                size: rows,
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&tv[i * width..(i + 1) * width]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            out,
            vec![ids.len(), width],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(p) => self.shape(*p).to_vec(),
            None => return Err(TensorError::Invalid("concat of zero tensors".into())),
        };
        if axis >= first.len() {
            return Err(TensorError::Index {
                op: "concat",
                index: axis,
                size: first.len(),
            });
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let same_rank = s.len() == first.len();
            if !same_rank || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.value(*p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let needs = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(
            out,
            shape,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
            },
            needs,
        ))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Index {
                op: "slice",
                index: axis,
                size: shape.len(),
            });
        }
        if start + len > shape[axis] {
            return Err(TensorError::Index {
                op: "slice",
                index: start + len,
                size: shape[axis],
            });
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let needs = self.needs(x);
        Ok(self.push(
            out,
            new_shape,
            Op::Slice {
                x,
                outer,
                len: full,
                inner,
                start,
            },
            needs,
        ))
    }

    /// Picks flat (row-major) positions of `x` into a 1-d result.
    pub fn gather(&mut self, x: Var, flat_idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = flat_idx.iter().find(|&&i| i >= xv.len()) {
            return Err(TensorError::Index {
                op: "gather",
                index: bad,
                size: xv.len(),
            });
        }
        let out = flat_idx.iter().map(|&i| xv[i]).collect();
        let needs = self.needs(x);
        Ok(self.push(
            out,
            vec![flat_idx.len()],
            Op::Gather {
                x,
                idx: flat_idx.to_vec(),
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let out = self.value(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(out, shape, Op::Reshape(x), needs))
    }

    /// Sum of all elements as a 0-d value.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().copied().sum::<R>();
        let needs = self.needs(x);
        self.push(vec![total], vec![], Op::Sum(x), needs)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| gelu_parts(*v).0).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(out, shape, Op::Gelu(x), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(out, shape, Op::Tanh(x), needs)
    }

    /// Per-row `-log softmax(logits)[target]`. Accepts `[V]` (one row) or
    /// `[rows × V]`; the result has one entry per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let (rows, width) = match s.as_slice() {
            [v] => (1, *v),
            [r, v] => (*r, *v),
            _ => {
                return Err(TensorError::Shape {
                    op: "cross_entropy",
                    lhs: s,
                    rhs: vec![targets.len()],
                })
            }
        };
        if rows != targets.len() {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= width) {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: bad,
                size: width,
            });
        }
        let lv = self.value(logits);
        if lv.iter().any(|v| v.is_nan()) {
            return Err(TensorError::Numeric {
                op: "cross_entropy",
            });
        }
        let mut probs = vec![R::zero(); lv.len()];
        let mut out = Vec::with_capacity(rows);
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * width..(r + 1) * width];
            let max = row.iter().copied().fold(R::neg_infinity(), R::max);
            let mut total = R::zero();
            for (j, v) in row.iter().enumerate() {
                let e = (*v - max).exp();
                probs[r * width + j] = e;
                total = total + e;
            }
            for p in &mut probs[r * width..(r + 1) * width] {
                *p = *p / total;
            }
            out.push(total.ln() - (row[t] - max));
        }
        let needs = self.needs(logits);
        Ok(self.push(
            out,
            vec![rows],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Shape {
                op: "backward",
                lhs: self.nodes[loss.0].shape.clone(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<Vec<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![R::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'a, R>, g: &[R], grads: &mut [Option<Vec<R>>]) {
        let nodes = &self.nodes;
                match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if let Some(da) = grad_slot(nodes, grads, *a) {
                    // da += g · bᵀ
                    R::gemm_acc(m, n, k, (g, n as isize, 1), (&nodes[b.0].value, 1, n as isize), da);
                }
                if let Some(db) = grad_slot(nodes, grads, *b) {
                    // db += aᵀ · g
                    R::gemm_acc(k, m, n, (&nodes[a.0].value, 1, k as isize), (g, n as isize, 1), db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    add_into(dx, &transpose2(g, c, r));
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = grad_slot(nodes, grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = grad_slot(nodes, grads, *b) {
                    add_into(db, g);
                }
            }
            Op::AddRow(a, b) => {
                if let Some(da) = grad_slot(nodes, grads, *a) {
                    add_into(da, g);
                }
                let n = nodes[b.0].value.len();
                if let Some(db) = grad_slot(nodes, grads, *b) {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = grad_slot(nodes, grads, *a) {
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(nodes[b.0].value.iter()) {
                        *d = *d + *gv * *bv;
                    }
                }
                if let Some(db) = grad_slot(nodes, grads, *b) {
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(nodes[a.0].value.iter()) {
                        *d = *d + *gv * *av;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d = *d + *gv * *c;
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = &node.value;
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum::<R>();
                            for j in 0..*len {
                                dx[at(j)] = dx[at(j)] + y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Log(x) => {
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(nodes[x.0].value.iter()) {
                        *d = *d + *gv / *xv;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: hats,
                rstd,
            } => {
                let gv = &nodes[gamma.0].value;
                let n = gv.len();
                let inv_n = R::lit(1.0 / n as f64);
                let rows = rstd.len();
                if let Some(dg) = grad_slot(nodes, grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..n {
                            dg[j] = dg[j] + g[r * n + j] * hats[r * n + j];
                        }
                    }
                }
                if let Some(db) = grad_slot(nodes, grads, *beta) {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    for r in 0..rows {
                        let dh: Vec<R> = (0..n).map(|j| g[r * n + j] * gv[j]).collect();
                        let mean_dh = dh.iter().copied().sum::<R>() * inv_n;
                        let mean_dh_h = (0..n).map(|j| dh[j] * hats[r * n + j]).sum::<R>() * inv_n;
                        for j in 0..n {
                            dx[r * n + j] = dx[r * n + j]
                                + rstd[r] * (dh[j] - mean_dh - hats[r * n + j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let width = nodes[table.0].shape[1];
                if let Some(dt) = grad_slot(nodes, grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * width..(id + 1) * width], &g[r * width..(r + 1) * width]);
                    }
                }
            }
            Op::Concat {
                parts,
                outer,
                inner,
            } => {
                let axis_total: usize = node.value.len() / (outer * inner);
                let mut offset = 0;
                for p in parts {
                    let plen = nodes[p.0].value.len() / (outer * inner);
                    if let Some(dp) = grad_slot(nodes, grads, *p) {
                        let chunk = plen * inner;
                        for o in 0..*outer {
                            let src = o * axis_total * inner + offset * inner;
                            add_into(&mut dp[o * chunk..(o + 1) * chunk], &g[src..src + chunk]);
                        }
                    }
                    offset += plen;
                }
            }
            Op::Slice {
                x,
                outer,
                len,
                inner,
                start,
            } => {
                let taken = node.value.len() / (outer * inner);
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    let chunk = taken * inner;
                    for o in 0..*outer {
                        let base = o * len * inner + start * inner;
                        add_into(&mut dx[base..base + chunk], &g[o * chunk..(o + 1) * chunk]);
                    }
                }
            }
            Op::Gather { x, idx } => {
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    for (gv, &i) in g.iter().zip(idx) {
                        dx[i] = dx[i] + *gv;
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    add_into(dx, g);
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    dx.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Gelu(x) => {
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(nodes[x.0].value.iter()) {
                        *d = *d + *gv * gelu_parts(*xv).1;
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    for ((d, gv), yv) in dx.iter_mut().zip(g).zip(node.value.iter()) {
                        *d = *d + *gv * (R::one() - *yv * *yv);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let width = probs.len() / targets.len();
                if let Some(dl) = grad_slot(nodes, grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        let gr = g[r];
                        for j in 0..width {
                            let onehot = if j == t { R::one() } else { R::zero() };
                            dl[r * width + j] = dl[r * width + j] + gr * (probs[r * width + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(t: &mut Tape<f64>, shape: Vec<usize>, data: Vec<f64>) -> Var {
        t.leaf_owned(Tensor::new(shape, data).unwrap().with_grad())
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::<f64>::new();
        let i = leaf(&mut t, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let m = leaf(&mut t, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let p = t.matmul(i, m).unwrap();
        assert_eq!(t.value(p), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_annihilating_product() {
        let mut t = Tape::<f64>::new();
        let a = leaf(&mut t, vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]);
        let b = leaf(&mut t, vec![2, 2], vec![0.0, 0.0, 0.0, 1.0]);
        let p = t.matmul(a, b).unwrap();
        assert_eq!(t.value(p), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let y = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(y), &[0.5, 0.5]);
        let x = t.constant(vec![2], vec![1000.0, 0.0]).unwrap();
        let y = t.softmax(x, 0).unwrap();
        assert!((t.value(y)[0] - 1.0).abs() < 1e-6);
        assert!(t.value(y)[1] >= 0.0 && t.value(y)[1] < 1e-6);
        let x = t.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = t.softmax(x, 0).unwrap();
        let total: f32 = t.value(y).iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_rejects_nan_and_bad_axis() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(vec![2], vec![f32::NAN, 0.0]).unwrap();
        assert!(matches!(t.softmax(x, 0), Err(TensorError::Numeric { .. })));
        let x = t.constant(vec![2], vec![0.0, 0.0]).unwrap();
        assert!(t.softmax(x, 1).is_err());
    }

    #[test]
    fn softmax_over_leading_axis() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![2, 2], vec![0.0, 1.0, 0.0, 3.0]).unwrap();
        let y = t.softmax(x, 0).unwrap();
        let v = t.value(y);
        assert!((v[0] - 0.5).abs() < 1e-12 && (v[2] - 0.5).abs() < 1e-12);
        assert!((v[1] + v[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_and_limit() {
        let mut t = Tape::<f32>::new();
        let l = t.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let ce = t.cross_entropy(l, &[0]).unwrap();
        assert!((t.value(ce)[0] - std::f32::consts::LN_2).abs() < 1e-6);
        let l = t.constant(vec![2], vec![80.0, 0.0]).unwrap();
        let ce = t.cross_entropy(l, &[0]).unwrap();
        assert!(t.value(ce)[0] < 1e-6);
        let l = t.constant(vec![2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            t.cross_entropy(l, &[2]),
            Err(TensorError::Index { .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut t = Tape::<f64>::new();
        let l = leaf(&mut t, vec![3], vec![0.5, -1.0, 2.0]);
        let ce = t.cross_entropy(l, &[1]).unwrap();
        let loss = t.sum(ce);
        let g = t.backward(loss).unwrap();
        let z: f64 = [0.5f64, -1.0, 2.0].iter().map(|v| v.exp()).sum();
        let expect = [0.5f64.exp() / z, (-1.0f64).exp() / z - 1.0, 2.0f64.exp() / z];
        for (a, b) in g.get(l).unwrap().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_skip_constants() {
        let mut t = Tape::<f64>::new();
        let a = leaf(&mut t, vec![2], vec![1.0, 2.0]);
        let c = t.constant(vec![2], vec![3.0, 4.0]).unwrap();
        let p = t.mul(a, c).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn slice_concat_roundtrip_values() {
        let mut t = Tape::<f32>::new();
        let x = t
            .constant(vec![2, 4], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0])
            .unwrap();
        let a = t.slice(x, 1, 0, 2).unwrap();
        let b = t.slice(x, 1, 2, 2).unwrap();
        assert_eq!(t.value(a), &[0.0, 1.0, 4.0, 5.0]);
        let y = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(y), t.value(x));
        let r = t.slice(x, 0, 1, 1).unwrap();
        assert_eq!(t.value(r), &[4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let mut t = Tape::<f32>::new();
        let e = t.constant(vec![3, 2], vec![0.0; 6]).unwrap();
        assert!(matches!(
            t.embedding(e, &[0, 3]),
            Err(TensorError::Index { index: 3, .. })
        ));
    }
}
