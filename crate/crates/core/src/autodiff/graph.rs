//! Reverse-mode gradient graph.
//!
//! A [`Graph`] is an append-only tape: every operation pushes one node whose
//! inputs are earlier nodes, so insertion order is a topological order and
//! [`Graph::backward`] simply walks the tape from the back. A node needs a
//! gradient when any of its inputs does; frozen constants never receive one.

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    L2Normalize(Var),
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Broadcast { x: Var, copies: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    PickRows { x: Var, indices: Vec<usize> },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// The tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Frozen leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
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

    /// Gradient of the last backward root with respect to `v`, if `v` took part.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// `a[..×k] · b[k×n] -> [..×n]`. Leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(self.shape_err("matmul", a, b));
        }
        let k = sb[0];
        let n = sb[1];
        let m = if k == 0 {
            sa[..sa.len() - 1].iter().product()
        } else {
            self.value(a).len() / k
        };
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let out = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(shape, out)?;
        Ok(self.derived(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched `[B×m×k]·[B×k×n]`, or `[B×m×k]·[B×n×k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(self.shape_err("batch_matmul", a, b));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(self.shape_err("batch_matmul", a, b));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            let at = &ad[t * m * k..(t + 1) * m * k];
            let bt = &bd[t * k * n..(t + 1) * k * n];
            let ot = &mut out[t * m * n..(t + 1) * m * n];
            if trans_b {
                gemm_nt_acc(at, bt, ot, m, k, n);
            } else {
                gemm_acc(at, bt, ot, m, k, n);
            }
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.derived(value, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    fn zip_same(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(op_name, a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.derived(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same length");
        self.derived(value, op, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(
            x,
            |v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    fn rowwise(&mut self, x: Var, f: impl Fn(&[f64], &mut [f64]) -> Result<()>, op: Op) -> Result<Var> {
        let src = self.value(x);
        let d = src.last_dim();
        let mut data = vec![0.0; src.len()];
        if d > 0 {
            for (r, (row, out)) in src.data().chunks(d).zip(data.chunks_mut(d)).enumerate() {
                f(row, out).map_err(|e| match e {
                    Error::Degenerate { .. } => Error::Degenerate { row: r },
                    other => other,
                })?;
            }
        }
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.derived(value, op, &[x]))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.rowwise(
            x,
            |row, out| {
                softmax_into(row, out);
                Ok(())
            },
            Op::Softmax(x),
        )
        .expect("softmax is total")
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        self.rowwise(
            x,
            |row, out| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for (o, v) in out.iter_mut().zip(row) {
                    *o = v - lse;
                }
                Ok(())
            },
            Op::LogSoftmax(x),
        )
        .expect("log_softmax is total")
    }

    /// `(x - mean) / sqrt(var + eps) * gain + bias` over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        if !(eps > 0.0) {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let v = self.rowwise(
            x,
            |row, out| {
                let (xhat, _) = normalize_row(row, eps);
                for i in 0..row.len() {
                    out[i] = xhat[i] * g[i] + b[i];
                }
                Ok(())
            },
            Op::LayerNorm { x, gain, bias, eps },
        )?;
        let rg = [x, gain, bias].iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes[v.0].requires_grad = rg;
        Ok(v)
    }

    /// Divide every last-axis row by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        self.rowwise(
            x,
            |row, out| {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::Degenerate { row: 0 });
                }
                for (o, v) in out.iter_mut().zip(row) {
                    *o = v / norm;
                }
                Ok(())
            },
            Op::L2Normalize(x),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.derived(value, Op::Reshape(x), &[x]))
    }

    /// Copying axis permutation: `out.shape[i] = x.shape[axes[i]]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let rank = src.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::contract(format!("bad permutation {axes:?} for rank {rank}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| src.shape()[a]).collect();
        let data = permute_data(src.data(), src.shape(), axes);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.derived(value, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    /// Stack `copies` copies of `x` along a new leading axis.
    pub fn broadcast(&mut self, x: Var, copies: usize) -> Var {
        let src = self.value(x);
        let mut shape = vec![copies];
        shape.extend_from_slice(src.shape());
        let data = src.data().repeat(copies);
        let value = Tensor::new(shape, data).expect("consistent");
        self.derived(value, Op::Broadcast { x, copies }, &[x])
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::contract("concat axis out of range"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(self.shape_err("concat", *first, p));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.derived(value, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    /// Copy of indices `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::contract(format!(
                "slice [{start}, {end}) on axis {axis} of shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.derived(value, Op::Slice { x, axis, start }, &[x]))
    }

    /// For a matrix `x[n×c]`, the vector `[x[i, indices[i]]]`.
    pub fn pick_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || shape[0] != indices.len() {
            return Err(Error::contract(format!(
                "pick_rows: {} indices for shape {shape:?}",
                indices.len()
            )));
        }
        let c = shape[1];
        if let Some(&bad) = indices.iter().find(|&&j| j >= c) {
            return Err(Error::contract(format!("index {bad} out of range {c}")));
        }
        let src = self.value(x).data();
        let data = indices.iter().enumerate().map(|(i, &j)| src[i * c + j]).collect();
        let value = Tensor::new(vec![indices.len()], data)?;
        Ok(self.derived(value, Op::PickRows { x, indices: indices.to_vec() }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.derived(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let m = if src.is_empty() {
            0.0
        } else {
            src.data().iter().sum::<f64>() / src.len() as f64
        };
        self.derived(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Populate `grad` for every node on a gradient path to `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let root_shape = self.shape(root).to_vec();
        self.nodes[root.0].grad = Some(Tensor::full(&root_shape, 1.0));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &g)?;
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, d) in g.data_mut().iter_mut().zip(delta) {
                    *a += d;
                }
            }
            None => {
                node.grad = Some(Tensor::new(node.value.shape().to_vec(), delta).expect("grad shape"));
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, g: &Tensor) -> Result<()> {
        let op = self.nodes[idx].op.clone();
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let k = self.shape(b)[0];
                let n = self.shape(b)[1];
                let m = if n == 0 { 0 } else { gd.len() / n };
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt_acc(gd, self.value(b).data(), &mut da, m, n, k);
                    self.accumulate(a, da);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn_acc(self.value(a).data(), gd, &mut db, k, m, n);
                    self.accumulate(b, db);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(a).to_vec();
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = g.shape()[2];
                if self.wants(a) {
                    let bd = self.value(b).data();
                    let mut da = vec![0.0; batch * m * k];
                    for t in 0..batch {
                        let gt = &gd[t * m * n..(t + 1) * m * n];
                        let bt = &bd[t * k * n..(t + 1) * k * n];
                        let dat = &mut da[t * m * k..(t + 1) * m * k];
                        if trans_b {
                            // b is [n×k]
                            gemm_acc(gt, bt, dat, m, n, k);
                        } else {
                            gemm_nt_acc(gt, bt, dat, m, n, k);
                        }
                    }
                    self.accumulate(a, da);
                }
                if self.wants(b) {
                    let ad = self.value(a).data();
                    let mut db = vec![0.0; batch * k * n];
                    for t in 0..batch {
                        let gt = &gd[t * m * n..(t + 1) * m * n];
                        let at = &ad[t * m * k..(t + 1) * m * k];
                        let dbt = &mut db[t * k * n..(t + 1) * k * n];
                        if trans_b {
                            // d(bᵀ) = aᵀ g, so db = gᵀ a: [n×m]·[m×k]
                            gemm_tn_acc(gt, at, dbt, n, m, k);
                        } else {
                            gemm_tn_acc(at, gt, dbt, k, m, n);
                        }
                    }
                    self.accumulate(b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, gd.to_vec());
                self.accumulate(b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, gd.to_vec());
                self.accumulate(b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let d = gd.iter().zip(self.value(b).data()).map(|(g, y)| g * y).collect();
                    self.accumulate(a, d);
                }
                if self.wants(b) {
                    let d = gd.iter().zip(self.value(a).data()).map(|(g, x)| g * x).collect();
                    self.accumulate(b, d);
                }
            }
            Op::Scale(x, c) => self.accumulate(x, gd.iter().map(|v| v * c).collect()),
            Op::Relu(x) => {
                let d = gd
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(x, d);
            }
            Op::Gelu(x) => {
                let d = gd
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(g, &v)| {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        g * (0.5 * (1.0 + t) + 0.5 * v * dt)
                    })
                    .collect();
                self.accumulate(x, d);
            }
            Op::Softmax(x) => {
                let y = self.nodes[idx].value.data();
                let d = y.len();
                let c = self.nodes[idx].value.last_dim().max(1);
                let mut dx = vec![0.0; d];
                for ((yr, gr), out) in y.chunks(c).zip(gd.chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(x, dx);
            }
            Op::LogSoftmax(x) => {
                let y = self.nodes[idx].value.data();
                let c = self.nodes[idx].value.last_dim().max(1);
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), out) in y.chunks(c).zip(gd.chunks(c)).zip(dx.chunks_mut(c)) {
                    let total: f64 = gr.iter().sum();
                    for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                        *o = gv - yv.exp() * total;
                    }
                }
                self.accumulate(x, dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.value(x).data();
                let gv = self.value(gain).data();
                let c = gv.len();
                let rows = if c == 0 { 0 } else { xv.len() / c };
                let mut dx = vec![0.0; xv.len()];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for r in 0..rows {
                    let row = &xv[r * c..(r + 1) * c];
                    let gr = &gd[r * c..(r + 1) * c];
                    let (xhat, inv_std) = normalize_row(row, eps);
                    let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                    let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for i in 0..c {
                        dx[r * c + i] = inv_std * (dxhat[i] - mean_d - xhat[i] * mean_dx);
                        dgain[i] += gr[i] * xhat[i];
                        dbias[i] += gr[i];
                    }
                }
                self.accumulate(x, dx);
                self.accumulate(gain, dgain);
                self.accumulate(bias, dbias);
            }
            Op::L2Normalize(x) => {
                let xv = self.value(x).data();
                let y = self.nodes[idx].value.data();
                let c = self.nodes[idx].value.last_dim().max(1);
                let mut dx = vec![0.0; xv.len()];
                for (((xr, yr), gr), out) in xv.chunks(c).zip(y.chunks(c)).zip(gd.chunks(c)).zip(dx.chunks_mut(c)) {
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * dot) / norm;
                    }
                }
                self.accumulate(x, dx);
            }
            Op::Reshape(x) => self.accumulate(x, gd.to_vec()),
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let d = permute_data(gd, g.shape(), &inverse);
                self.accumulate(x, d);
            }
            Op::Broadcast { x, copies } => {
                let n = self.value(x).len();
                let mut d = vec![0.0; n];
                for c in 0..copies {
                    for (o, v) in d.iter_mut().zip(&gd[c * n..(c + 1) * n]) {
                        *o += v;
                    }
                }
                self.accumulate(x, d);
            }
            Op::Concat { parts, axis } => {
                let shape = g.shape().to_vec();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(p)[axis] * inner;
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            let base = o * shape[axis] * inner + offset;
                            d.extend_from_slice(&gd[base..base + len]);
                        }
                        self.accumulate(p, d);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(x).to_vec();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let width = g.shape()[axis] * inner;
                let mut d = vec![0.0; self.value(x).len()];
                for o in 0..outer {
                    let base = o * shape[axis] * inner + start * inner;
                    d[base..base + width].copy_from_slice(&gd[o * width..(o + 1) * width]);
                }
                self.accumulate(x, d);
            }
            Op::PickRows { x, indices } => {
                let c = self.shape(x)[1];
                let mut d = vec![0.0; self.value(x).len()];
                for (i, &j) in indices.iter().enumerate() {
                    d[i * c + j] = gd[i];
                }
                self.accumulate(x, d);
            }
            Op::Sum(x) => {
                let n = self.value(x).len();
                self.accumulate(x, vec![gd[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(x).len();
                if n > 0 {
                    self.accumulate(x, vec![gd[0] / n as f64; n]);
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Returns `(xhat, 1/sqrt(var + eps))` with the population variance.
fn normalize_row(row: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    (row.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

fn permute_data(src: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total: usize = shape.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0; rank];
    for _ in 0..total {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let b = g.constant(t(&[2, 1], &[0.0, 5.0]));
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn layer_norm_edge_rows() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::full(&[3], 1.0));
        let bias = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(t(&[1, 3], &[5.0, 5.0, 5.0]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

        let gain = g.constant(Tensor::full(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[2], &[1.0, -1.0]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-9 && (v[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let x = g.constant(t(&[2], &[1000.0, 0.0]));
        let y = g.softmax(x);
        let v = g.value(y).data();
        assert!(v.iter().all(|p| p.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-15 && v[1] < 1e-300);
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut g = Graph::new();
        let w = g.param(t(&[3], &[0.3, -1.0, 2.0]));
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let w = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let w = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        for k in 1..6 {
            let mut g = Graph::new();
            let w = g.param(t(&[2], &[0.5, -2.0]));
            let parts: Vec<Var> = (0..k).map(|_| w).collect();
            let cat = g.concat(&parts, 0).unwrap();
            let s = g.sum(cat);
            g.backward(s).unwrap();
            assert_eq!(g.grad(w).unwrap().data(), &[k as f64, k as f64]);
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.param(t(&[2, 1], &[1.0, 1.0]));
        let y = g.matmul(c, w).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(w).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.constant(t(&[2, 3, 4], &data));
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(y), &[4, 2, 3]);
        // y[c, a, b] = x[a, b, c]
        assert_eq!(g.value(y).data()[1 * 6 + 0 * 3 + 2], data[0 * 12 + 2 * 4 + 1]);
        let z = g.permute(y, &[1, 2, 0]).unwrap();
        assert!(g.value(z).bit_eq(g.value(x)));
    }

    #[test]
    fn l2_normalize_zero_row_is_degenerate() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        assert!(matches!(g.l2_normalize(x), Err(Error::Degenerate { row: 1 })));
    }
}
