//! Tape-based reverse-mode differentiation.
//!
//! Every forward primitive appends a node to the [`Graph`]; nodes are
//! recorded in execution order, so the recording order is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.

use crate::error::{Error, Result};

use super::tensor::{dot, mm, mm_nt, mm_tn};
use super::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Mean {
        a: Var,
        axis: usize,
    },
    Sum(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    Reshape(Var),
    PickLogSoftmax {
        logits: Var,
        targets: Vec<usize>,
    },
    MaskedMean {
        a: Var,
        mask: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded computation. Confined to one thread; independent graphs may
/// be evaluated concurrently.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zero when `v` does not reach the root.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Borrowed gradient buffer, `None` when `v` received no gradient.
    pub fn raw(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

/// Strips leading unit axes, returning the effective broadcast shape.
fn trim_ones(shape: &[usize]) -> &[usize] {
    let first = shape.iter().position(|&d| d != 1).unwrap_or(shape.len());
    &shape[first..]
}

fn broadcasts(lhs: &[usize], rhs: &[usize]) -> bool {
    let r = trim_ones(rhs);
    lhs.len() >= r.len() && &lhs[lhs.len() - r.len()..] == r
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        if cfg!(debug_assertions) && !value.is_finite() {
            debug_assert!(
                parents.iter().any(|p| !self.nodes[p.0].value.is_finite()),
                "non-finite output from {op:?}"
            );
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, v: Var, op: &'static str, other: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, self.shape(other)));
        }
        Ok((s[0], s[1]))
    }

    /// `a · b` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul", b)?;
        let (k2, n) = self.matrix_dims(b, "matmul", a)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let c = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(&[m, n], c)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b: false }, &[a, b]))
    }

    /// `a · bᵀ` for 2-D operands.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_t", b)?;
        let (n, k2) = self.matrix_dims(b, "matmul_t", a)?;
        if k != k2 {
            return Err(Error::shape("matmul_t", self.shape(a), self.shape(b)));
        }
        let c = mm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(&[m, n], c)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b: true }, &[a, b]))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcasts(sa, sb) {
            return Err(Error::shape(name, sa, sb));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let n = bv.len();
        let out: Vec<T> = av.iter().enumerate().map(|(i, &x)| f(x, bv[i % n])).collect();
        let value = Tensor::new(sa, out)?;
        Ok(self.push(value, op, &[a, b]))
    }

    /// Elementwise sum; `b` broadcasts over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product; `b` broadcasts over the leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(v.shape(), data).expect("unary shape");
        self.push(value, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let cols = v.cols();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let value = Tensor::new(v.shape(), out).expect("softmax shape");
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        for p in [gamma, beta] {
            if self.value(p).len() != cols {
                return Err(Error::shape("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let eps = 1e-5;
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.rows();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(cols) {
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(T::of(r));
            for (j, v) in row.iter().enumerate() {
                let h = T::of((v.f64() - mean) * r);
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Gathers rows of a 2-D `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::shape("embedding", t.shape(), &[ids.len()]));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Domain(format!(
                    "embedding id {id} out of range for table of {rows} rows"
                )));
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape("mean", &shape, &[axis]));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let data = self.value(a).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..n).map(|k| data[(o * n + k) * inner + i].f64()).sum();
                out.push(T::of(s / n as f64));
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::Mean { a, axis }, &[a]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|v| v.f64()).sum();
        self.push(Tensor::scalar(T::of(s)), Op::Sum(a), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Domain("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let block = n * inner;
                out.extend_from_slice(&self.value(p).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, len]));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let data = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&data[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::Slice { a, axis, start }, &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("transpose", &s, &[2]));
        }
        let value = Tensor::new(&[s[1], s[0]], transpose(self.value(a).data(), s[0], s[1]))?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Row-wise `log softmax(logits)[targets[i]]`, a vector of length `T`.
    pub fn pick_log_softmax(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let s = lv.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape("pick_log_softmax", s, &[targets.len()]));
        }
        let v = s[1];
        let mut out = Vec::with_capacity(targets.len());
        for (row, &t) in lv.data().chunks(v).zip(targets) {
            if t >= v {
                return Err(Error::Domain(format!("target id {t} outside vocabulary of {v}")));
            }
            out.push(T::of(row[t].f64() - log_sum_exp(row)));
        }
        let value = Tensor::new(&[targets.len()], out)?;
        Ok(self.push(
            value,
            Op::PickLogSoftmax {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Mean of the entries of a vector whose mask bit is set.
    pub fn masked_mean(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let av = self.value(a);
        if av.len() != mask.len() {
            return Err(Error::shape("masked_mean", av.shape(), &[mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Domain("mean over an all-masked sequence".into()));
        }
        let s: f64 = av
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(x, _)| x.f64())
            .sum();
        let value = Tensor::scalar(T::of(s / count as f64));
        Ok(self.push(value, Op::MaskedMean { a, mask: mask.to_vec() }, &[a]))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Domain(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[0], sa[1]);
                if !trans_b {
                    let n = sb[1];
                    if wants(*a) {
                        accumulate(grads, *a, mm_nt(g, val(*b), m, n, k));
                    }
                    if wants(*b) {
                        accumulate(grads, *b, mm_tn(val(*a), g, m, k, n));
                    }
                } else {
                    let n = sb[0];
                    if wants(*a) {
                        accumulate(grads, *a, mm(g, val(*b), m, n, k));
                    }
                    if wants(*b) {
                        accumulate(grads, *b, mm_tn(g, val(*a), m, n, k));
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    let n = val(*b).len();
                    let mut gb = vec![T::zero(); n];
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % n] += gv;
                    }
                    if sign < T::zero() {
                        gb.iter_mut().for_each(|x| *x = -*x);
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let n = bv.len();
                if wants(*a) {
                    accumulate(grads, *a, g.iter().enumerate().map(|(i, &gv)| gv * bv[i % n]).collect());
                }
                if wants(*b) {
                    let mut gb = vec![T::zero(); n];
                    for (i, (&gv, &x)) in g.iter().zip(av).enumerate() {
                        gb[i % n] += gv * x;
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.iter().map(|&gv| gv * *c).collect()),
            Op::AddScalar(a) => accumulate(grads, *a, g.to_vec()),
            Op::Square(a) => {
                let two = T::of(2.0);
                accumulate(grads, *a, g.iter().zip(val(*a)).map(|(&gv, &x)| gv * two * x).collect())
            }
            Op::Sigmoid(a) => accumulate(
                grads,
                *a,
                g.iter().zip(out).map(|(&gv, &y)| gv * y * (T::one() - y)).collect(),
            ),
            Op::Tanh(a) => accumulate(
                grads,
                *a,
                g.iter().zip(out).map(|(&gv, &y)| gv * (T::one() - y * y)).collect(),
            ),
            Op::Relu(a) => accumulate(
                grads,
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                    .collect(),
            ),
            Op::Softmax(a) => {
                let cols = node.value.cols();
                let mut ga = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(cols).zip(out.chunks(cols)) {
                    let s = dot(gr, yr);
                    ga.extend(gr.iter().zip(yr).map(|(&gv, &y)| y * (gv - s)));
                }
                accumulate(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = node.value.cols();
                let gam = val(*gamma);
                if wants(*x) {
                    let n = T::of(cols as f64);
                    let mut gx = Vec::with_capacity(g.len());
                    for ((gr, hr), &r) in g.chunks(cols).zip(xhat.chunks(cols)).zip(rstd) {
                        let dh: Vec<T> = gr.iter().zip(gam).map(|(&gv, &gm)| gv * gm).collect();
                        let sum_dh: T = dh.iter().copied().sum();
                        let sum_dh_h = dot(&dh, hr);
                        gx.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(&d, &h)| r / n * (n * d - sum_dh - h * sum_dh_h)),
                        );
                    }
                    accumulate(grads, *x, gx);
                }
                if wants(*gamma) || wants(*beta) {
                    let mut gg = vec![T::zero(); cols];
                    let mut gb = vec![T::zero(); cols];
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            gg[j] += gr[j] * hr[j];
                            gb[j] += gr[j];
                        }
                    }
                    if wants(*gamma) {
                        accumulate(grads, *gamma, gg);
                    }
                    if wants(*beta) {
                        accumulate(grads, *beta, gb);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut gt = vec![T::zero(); val(*table).len()];
                for (gr, &id) in g.chunks(d).zip(ids) {
                    for (t, &gv) in gt[id * d..(id + 1) * d].iter_mut().zip(gr) {
                        *t += gv;
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::Mean { a, axis } => {
                let (outer, n, inner) = axis_split(self.shape(*a), *axis);
                let inv = T::of(1.0 / n as f64);
                let mut ga = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            ga[(o * n + k) * inner + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Sum(a) => accumulate(grads, *a, vec![g[0]; val(*a).len()]),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    if wants(p) {
                        let mut gp = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[from..from + n * inner]);
                        }
                        accumulate(grads, p, gp);
                    }
                    offset += n;
                }
            }
            Op::Slice { a, axis, start } => {
                let (outer, n, inner) = axis_split(self.shape(*a), *axis);
                let len = node.value.shape()[*axis];
                let mut ga = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let to = (o * n + start) * inner;
                    ga[to..to + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *a, ga);
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                accumulate(grads, *a, transpose(g, s[0], s[1]));
            }
            Op::Reshape(a) => accumulate(grads, *a, g.to_vec()),
            Op::PickLogSoftmax { logits, targets } => {
                let lv = self.value(*logits);
                let v = lv.cols();
                let mut gl = Vec::with_capacity(lv.len());
                for ((row, &t), &gv) in lv.data().chunks(v).zip(targets).zip(g) {
                    let mut p = row.to_vec();
                    softmax_in_place(&mut p);
                    for (j, pj) in p.iter().enumerate() {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        gl.push(gv * (onehot - *pj));
                    }
                }
                accumulate(grads, *logits, gl);
            }
            Op::MaskedMean { a, mask } => {
                let count = mask.iter().filter(|&&m| m).count();
                let w = g[0] * T::of(1.0 / count as f64);
                accumulate(grads, *a, mask.iter().map(|&m| if m { w } else { T::zero() }).collect());
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (x, d) in g.iter_mut().zip(delta) {
                *x += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn transpose<T: Scalar>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.f64()));
    let s: f64 = row.iter().map(|&x| (x.f64() - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut s = 0.0f64;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        s += x.f64();
    }
    let inv = T::of(1.0 / s);
    for x in row.iter_mut() {
        *x *= inv;
    }
}
