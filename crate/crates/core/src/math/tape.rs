//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every op appends one node holding its output value. Because a node can
//! only reference nodes created before it, tape order is already a
//! topological order and the backward pass is a single reverse sweep.

use std::sync::Arc;

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::skeleton::kinematics::{fk_backward_raw, fk_forward_raw, FkTree};
use crate::skeleton::rotation::{sixd_backward_raw, sixd_forward_raw};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Gelu,
    Silu,
    Tanh,
    Sigmoid,
    Relu,
    Sqrt,
    Square,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Gelu => "gelu",
            Unary::Silu => "silu",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
            Unary::Sqrt => "sqrt",
            Unary::Square => "square",
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    Unary(Var, Unary),
    Embedding { table: Var, indices: Vec<usize> },
    Mse(Var, Var),
    SixdToMatrix(Var),
    ForwardKinematics { root: Var, rots: Var, tree: Arc<FkTree> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    degenerate_rotations: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when `var` is not on
    /// a path to the loss.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn raw(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    // innermost dimension copied in a tight loop
    let last = nd - 1;
    let last_len = out_shape[last];
    let last_stride = strides[last];
    if total == 0 {
        return (out, out_shape);
    }
    loop {
        for j in 0..last_len {
            out.push(data[offset + j * last_stride]);
        }
        // advance the outer odometer
        let mut d = last;
        loop {
            if d == 0 {
                return (out, out_shape);
            }
            d -= 1;
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
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

    /// Number of degenerate 6D inputs that were silently re-orthogonalized.
    pub fn degenerate_rotations(&self) -> usize {
        self.degenerate_rotations
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a tensor as a leaf. Gradients are tracked iff the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad())
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        let value = Tensor::new(&shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad: rg,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data = av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s shape (bias, positional table).
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ys = self.shape(y);
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(Error::shape(
                "add_broadcast",
                format!("{ys:?} is not a suffix of {xs:?}"),
            ));
        }
        let yv = self.value(y).data();
        let period = yv.len().max(1);
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + yv[i % period])
            .collect();
        let shape = xs.to_vec();
        self.push("add_broadcast", shape, data, Op::AddBroadcast(x, y), &[x, y])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, data, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v + s).collect();
        let shape = self.shape(x).to_vec();
        self.push("add_scalar", shape, data, Op::AddScalar(x), &[x])
    }

    /// `x @ w` with `x: [..., k]` and `w: [k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] {
            return Err(Error::shape("matmul", format!("{xs:?} @ {ws:?}")));
        }
        let k = ws[0];
        let n = ws[1];
        let m = numel(&xs) / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(x).data(), false, self.value(w).data(), false, &mut out, false);
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        self.push("matmul", shape, out, Op::MatMul(x, w), &[x, w])
    }

    /// Batched matrix product over leading dims: `a: [..., m, k]`,
    /// `b: [..., k, n]` (or `[..., n, k]` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        let nd = as_.len();
        if nd < 2 || bs.len() != nd || as_[..nd - 2] != bs[..nd - 2] {
            return Err(Error::shape("bmm", format!("{as_:?} x {bs:?}")));
        }
        let (m, k) = (as_[nd - 2], as_[nd - 1]);
        let (kb, n) = if trans_b {
            (bs[nd - 1], bs[nd - 2])
        } else {
            (bs[nd - 2], bs[nd - 1])
        };
        if k != kb {
            return Err(Error::shape("bmm", format!("inner dims {k} vs {kb}")));
        }
        let batch: usize = as_[..nd - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let mut shape = as_[..nd - 2].to_vec();
        shape.extend([m, n]);
        self.push("bmm", shape, out, Op::Bmm { a, b, trans_b }, &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let data = self.value(x).data().to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if perm.len() != shape.len() || check.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(Error::shape("permute", format!("bad perm {perm:?} for {shape:?}")));
        }
        let (data, out_shape) = permute_data(self.value(x).data(), &shape, perm);
        self.push("permute", out_shape, data, Op::Permute(x, perm.to_vec()), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(d, &n)| d != axis && n != base[d])
            {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                let src = self.value(*v).data();
                out.extend_from_slice(&src[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// `len` entries of `x` along `axis`, starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, dim, inner) = split_at_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        self.push("slice", oshape, out, Op::Slice { x, axis, start }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", vec![], vec![s], Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.numel().max(1) as f64;
        let s = t.data().iter().sum::<f64>() / n;
        self.push("mean", vec![], vec![s], Op::MeanAll(x), &[x])
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::shape("sum_last", "scalar input"))?;
        let data = self
            .value(x)
            .data()
            .chunks(n.max(1))
            .map(|c| c.iter().sum())
            .collect();
        self.push("sum_last", shape[..shape.len() - 1].to_vec(), data, Op::SumLast(x), &[x])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape(
                "layer_norm",
                format!("affine params {:?}/{:?} for width {n}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push("softmax", shape, out, Op::Softmax(x), &[x])
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let xv = self.value(x).data();
        if kind == Unary::Sqrt && xv.iter().any(|&v| v < 0.0) {
            return Err(Error::Contract("sqrt of a negative value".into()));
        }
        let data = xv
            .iter()
            .map(|&v| match kind {
                Unary::Gelu => 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()),
                Unary::Silu => v * sigmoid(v),
                Unary::Tanh => v.tanh(),
                Unary::Sigmoid => sigmoid(v),
                Unary::Relu => v.max(0.0),
                Unary::Sqrt => v.sqrt(),
                Unary::Square => v * v,
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(kind.name(), shape, data, Op::Unary(x, kind), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu)
    }
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Silu)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sqrt)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    /// Rows of `table: [V, d]` selected by `indices`, giving `[len, d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape("embedding", format!("table shape {ts:?}")));
        }
        let (vocab, d) = (ts[0], ts[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index {
                index: bad,
                max: vocab.saturating_sub(1),
            });
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        self.push(
            "embedding",
            vec![indices.len(), d],
            out,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let n = av.len().max(1) as f64;
        let s = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        self.push("mse", vec![], vec![s], Op::Mse(a, b), &[a, b])
    }

    /// `[..., 6]` continuous rotation parameters to `[..., 9]` row-major
    /// rotation matrices. Degenerate inputs are re-orthogonalized against a
    /// fixed fallback axis and counted instead of failing.
    pub fn sixd_to_matrix(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.last() != Some(&6) {
            return Err(Error::shape("sixd_to_matrix", format!("last dim of {shape:?} must be 6")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len() / 6 * 9);
        let mut degenerate = 0;
        for c in xv.chunks(6) {
            let a: [f64; 6] = c.try_into().unwrap();
            let (m, deg) = sixd_forward_raw(&a);
            degenerate += deg as usize;
            out.extend_from_slice(&m);
        }
        self.degenerate_rotations += degenerate;
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = 9;
        self.push("sixd_to_matrix", oshape, out, Op::SixdToMatrix(x), &[x])
    }

    /// Batched forward kinematics: `root: [N, 3]`, `rots: [N, J, 9]` local
    /// rotation matrices, returning global joint positions `[N, J, 3]`.
    pub fn forward_kinematics(&mut self, root: Var, rots: Var, tree: Arc<FkTree>) -> Result<Var> {
        let rs = self.shape(root).to_vec();
        let qs = self.shape(rots).to_vec();
        let j = tree.len();
        if rs.len() != 2 || rs[1] != 3 || qs != [rs[0], j, 9] {
            return Err(Error::shape(
                "forward_kinematics",
                format!("root {rs:?}, rotations {qs:?}, joints {j}"),
            ));
        }
        let n = rs[0];
        let mut out = vec![0.0; n * j * 3];
        fk_forward_raw(&tree, self.value(root).data(), self.value(rots).data(), &mut out, None);
        self.push(
            "forward_kinematics",
            vec![n, j, 3],
            out,
            Op::ForwardKinematics { root, rots, tree },
            &[root, rots],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contrib),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    acc(grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddBroadcast(x, y) => {
                if self.wants(*x) {
                    acc(grads, *x, g.to_vec());
                }
                if self.wants(*y) {
                    let period = self.value(*y).numel().max(1);
                    let mut gy = vec![0.0; period];
                    for (i, v) in g.iter().enumerate() {
                        gy[i % period] += v;
                    }
                    acc(grads, *y, gy);
                }
            }
            Op::Scale(x, s) => {
                if self.wants(*x) {
                    acc(grads, *x, g.iter().map(|v| v * s).collect());
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if self.wants(*x) {
                    acc(grads, *x, g.to_vec());
                }
            }
            Op::MatMul(x, w) => {
                let ws = self.shape(*w);
                let (k, n) = (ws[0], ws[1]);
                let m = g.len() / n.max(1);
                if self.wants(*x) {
                    let mut gx = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.value(*w).data(), true, &mut gx, false);
                    acc(grads, *x, gx);
                }
                if self.wants(*w) {
                    let mut gw = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*x).data(), true, g, false, &mut gw, false);
                    acc(grads, *w, gw);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let as_ = self.shape(*a);
                let nd = as_.len();
                let (m, k) = (as_[nd - 2], as_[nd - 1]);
                let batch: usize = as_[..nd - 2].iter().product();
                let n = g.len() / (batch * m).max(1);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        // C = A B  -> dA = dC B^T ; C = A B^T -> dA = dC B
                        gemm(m, n, k, gi, false, bi, !*trans_b, &mut ga[i * m * k..(i + 1) * m * k], false);
                    }
                    acc(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B is n×k: dB = dC^T A
                            gemm(n, m, k, gi, true, ai, false, dst, false);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, dst, false);
                        }
                    }
                    acc(grads, *b, gb);
                }
            }
            Op::Permute(x, perm) => {
                if self.wants(*x) {
                    let (gx, _) = permute_data(g, node.value.shape(), &inverse_perm(perm));
                    acc(grads, *x, gx);
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_at_axis(shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    if self.wants(*v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[base..base + len * inner]);
                        }
                        acc(grads, *v, gv);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    let (outer, dim, inner) = split_at_axis(xs, *axis);
                    let len = node.value.shape()[*axis];
                    let mut gx = vec![0.0; numel(xs)];
                    for o in 0..outer {
                        let dst = (o * dim + start) * inner;
                        let src = o * len * inner;
                        gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    acc(grads, *x, gx);
                }
            }
            Op::SumAll(x) => {
                if self.wants(*x) {
                    acc(grads, *x, vec![g[0]; self.value(*x).numel()]);
                }
            }
            Op::MeanAll(x) => {
                if self.wants(*x) {
                    let n = self.value(*x).numel();
                    acc(grads, *x, vec![g[0] / n.max(1) as f64; n]);
                }
            }
            Op::SumLast(x) => {
                if self.wants(*x) {
                    let n = *self.shape(*x).last().unwrap();
                    let gx = g.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
                    acc(grads, *x, gx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.shape(*gamma)[0];
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let mut gg = vec![0.0; n];
                    for (i, v) in g.iter().enumerate() {
                        gg[i % n] += v * xhat[i];
                    }
                    acc(grads, *gamma, gg);
                }
                if self.wants(*beta) {
                    let mut gb = vec![0.0; n];
                    for (i, v) in g.iter().enumerate() {
                        gb[i % n] += v;
                    }
                    acc(grads, *beta, gb);
                }
                if self.wants(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, rs) in rstd.iter().enumerate() {
                        let off = r * n;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..n {
                            let d = g[off + j] * gam[j];
                            sum_d += d;
                            sum_dx += d * xhat[off + j];
                        }
                        let inv_n = 1.0 / n as f64;
                        for j in 0..n {
                            let d = g[off + j] * gam[j];
                            gx[off + j] = rs * (d - inv_n * sum_d - xhat[off + j] * inv_n * sum_dx);
                        }
                    }
                    acc(grads, *x, gx);
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let n = *node.value.shape().last().unwrap();
                    let mut gx = vec![0.0; y.len()];
                    for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(grads, *x, gx);
                }
            }
            Op::Unary(x, kind) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    let yv = node.value.data();
                    let gx = g
                        .iter()
                        .zip(xv)
                        .zip(yv)
                        .map(|((&gv, &v), &y)| {
                            gv * match kind {
                                Unary::Gelu => {
                                    let u = GELU_C * (v + 0.044715 * v * v * v);
                                    let t = u.tanh();
                                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                                    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
                                }
                                Unary::Silu => {
                                    let s = sigmoid(v);
                                    s * (1.0 + v * (1.0 - s))
                                }
                                Unary::Tanh => 1.0 - y * y,
                                Unary::Sigmoid => y * (1.0 - y),
                                Unary::Relu => {
                                    if v > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Sqrt => {
                                    if y > 0.0 {
                                        0.5 / y
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Square => 2.0 * v,
                            }
                        })
                        .collect();
                    acc(grads, *x, gx);
                }
            }
            Op::Embedding { table, indices } => {
                if self.wants(*table) {
                    let d = self.shape(*table)[1];
                    let mut gt = vec![0.0; self.value(*table).numel()];
                    for (row, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] += g[row * d + j];
                        }
                    }
                    acc(grads, *table, gt);
                }
            }
            Op::Mse(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let scale = 2.0 * g[0] / av.len().max(1) as f64;
                let diff: Vec<f64> = av.iter().zip(bv).map(|(x, y)| scale * (x - y)).collect();
                if self.wants(*b) {
                    acc(grads, *b, diff.iter().map(|v| -v).collect());
                }
                if self.wants(*a) {
                    acc(grads, *a, diff);
                }
            }
            Op::SixdToMatrix(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    let mut gx = Vec::with_capacity(xv.len());
                    for (c, gm) in xv.chunks(6).zip(g.chunks(9)) {
                        let a: [f64; 6] = c.try_into().unwrap();
                        let gm: [f64; 9] = gm.try_into().unwrap();
                        gx.extend_from_slice(&sixd_backward_raw(&a, &gm));
                    }
                    acc(grads, *x, gx);
                }
            }
            Op::ForwardKinematics { root, rots, tree } => {
                let rv = self.value(*root).data();
                let qv = self.value(*rots).data();
                let mut groot = vec![0.0; rv.len()];
                let mut grots = vec![0.0; qv.len()];
                fk_backward_raw(tree, qv, g, &mut groot, &mut grots);
                if self.wants(*root) {
                    acc(grads, *root, groot);
                }
                if self.wants(*rots) {
                    acc(grads, *rots, grots);
                }
            }
        }
    }
}
